"""Constants produced by the dense oracles in oracles.py and frozen here.

test_oracles.py re-derives each one, so a drift of either side is caught.
"""

SPIN_PROBABILITIES = {(0, 0, 0): 0.25, (0, 1, 0): 0.25, (1, 0, 0): 0.5, (1, 1, 0): 0.0}
SPIN_COARSE_PROBABILITIES = (0.25, 0.25, 0.5)

# past interference after rotating the coin into the x basis (record-rotating extension)
SPIN_COIN_X_INTERFERENCE = 0.125

# the unrecorded two-slit analogue: every branch 1/4, interference 1/4
TWOSLIT_PROBABILITY = 0.25
TWOSLIT_MAX_OFFDIAG = 0.25
TWOSLIT_SIGMA_Z_VIOLATION = 1.0

# four-site XX chain, volumes {0,1},{2,3}, ranges [0,.75,1], two steps of 0.5
CHAIN_MEDIUM_OFFDIAG = 0.06638748517015752
CHAIN_LEAVES = 16
