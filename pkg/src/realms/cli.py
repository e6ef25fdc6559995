"""realms command line: run a scenario, write a JSON report plus CSV matrices.

Exit codes: 0 all requested checks pass, 1 a check failed, 2 the scenario or
arguments did not parse, 3 internal error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .adaptive import maximal_refine
from .decoherence import extract_z, medium_check, strong_check, too_strong_check
from .errors import NonCommutingError, NotSystemLocalError, ScenarioError, StrongDecoherenceError
from .framework import check_narrative, factor_hilbert, factorization_residuals, framework_for_tree
from .histories import check_branch_sum
from .linalg import random_hermitian
from .records import (
    branch_density_matrix,
    construct_records,
    expectation_identity_check,
    permanence_check,
    verify_records,
)
from .report import SCHEMA_TAG, write_json, write_matrix_csv
from .scenario import load_scenario

log = logging.getLogger("realms")

SUBCOMMANDS = ("check-decoherence", "factor", "records", "density", "refine", "all")
EXIT_OK, EXIT_FAIL, EXIT_PARSE, EXIT_INTERNAL = 0, 1, 2, 3
RESIDUAL_GATE = 1e-10
N_RANDOM_OBSERVABLES = 20


@dataclass
class RunConfig:
    scenario: str
    command: str
    out: str = "realms-out"
    tol_decoh: float | None = None
    tol_proj: float | None = None
    seed: int = 0
    threads: int | None = None


def _label(lab) -> str:
    return "-".join(str(x) for x in lab) or "root"


class Runner:
    def __init__(self, cfg: RunConfig, scenario):
        self.cfg = cfg
        self.sc = scenario
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.checks: dict[str, bool] = {}
        self.report: dict = {}
        self._tree = None
        self._fact = None
        self._fw = None

    @property
    def tree(self):
        if self._tree is None:
            self._tree = self.sc.build_tree()
        return self._tree

    def gate(self, name: str, passed: bool, asserted: bool = True):
        """Record a check; unasserted checks are reported but never fail the run."""
        self.checks[name] = bool(passed)
        if not asserted:
            self.report.setdefault("informational", []).append(name)

    def failed(self) -> bool:
        info = set(self.report.get("informational", []))
        return any(not ok for k, ok in self.checks.items() if k not in info)

    def framework(self):
        if self._fw is None:
            self._fw = framework_for_tree(self.tree)
        return self._fw

    def record_factorization(self):
        if self._fact is None:
            f = self.sc.record_factorization()
            source = "subsystems"
            if f is None:
                f = factor_hilbert(self.framework(), env_dim=self.sc.env_dim)
                source = "framework"
            self._fact = (f, source)
        return self._fact

    def tree_section(self):
        if "tree" in self.report:
            return
        tree = self.tree
        bs = check_branch_sum(tree)
        self.report["tree"] = dict(tree.summary(), branch_sum=bs.to_dict())
        self.gate("branch_sum", bs.passed)

    def check_decoherence(self):
        self.tree_section()
        tree = self.tree
        med = medium_check(tree)
        write_matrix_csv(self.out / "gram.csv", med.gram, [_label(lab) for lab in med.labels])
        sec = {"medium": med.to_dict()}
        self.gate("medium", med.passes, self.sc.assert_checks)
        try:
            fact, source = self.record_factorization()
            zf = extract_z(tree, fact)
            st = strong_check(tree, fact, zf=zf)
            write_matrix_csv(self.out / "z_gram.csv", st.z_gram)
            sec["strong"] = dict(st.to_dict(), factorization=source)
            sec["too_strong"] = too_strong_check(zf, tree.tol).to_dict()
        except (NotSystemLocalError, NonCommutingError) as exc:
            sec["strong"] = {"passes": False, "error": str(exc)}
        self.report["decoherence"] = sec
        print(f"medium decoherence: {'pass' if med.passes else 'FAIL'} (max offdiag {med.max_offdiag:.3e})")
        if med.witness is not None and not med.passes:
            print(f"  witness pair {med.witness[0]} / {med.witness[1]}")
        if "max_cross_past" in sec["strong"]:
            print(f"strong decoherence: {'pass' if sec['strong']['passes'] else 'fail'} "
                  f"(max cross-past overlap {sec['strong']['max_cross_past']:.3e})")

    def factor(self):
        self.tree_section()
        tree = self.tree
        narr = check_narrative(tree)
        sec = {"narrative": narr.to_dict()}
        try:
            fw = self.framework()
        except NonCommutingError as exc:
            sec["error"] = str(exc)
            self.report["factorization"] = sec
            self.gate("factorization", False)
            print(f"factorization: FAIL ({exc})")
            return
        fact = factor_hilbert(fw, env_dim=self.sc.env_dim)
        res = factorization_residuals(fw, fact)
        rec = fw.recovery_residuals()
        sec.update(framework=fw.to_dict(), d_s=fact.d_s, d_e=fact.d_e,
                   trivial_environment=fact.trivial_environment, warnings=fact.warnings,
                   reconstruction_residual=max(res), recovery_residual=max(rec) if rec else 0.0,
                   block_residuals=res)
        self.report["factorization"] = sec
        ok = narr.passed and max(res) <= RESIDUAL_GATE and (max(rec) if rec else 0.0) <= RESIDUAL_GATE
        self.gate("factorization", ok)
        print(f"factorization: d_s={fact.d_s} d_e={fact.d_e} ranks={fw.ranks} "
              f"reconstruction residual {max(res):.3e}")

    def records(self):
        self.tree_section()
        tree = self.tree
        fact, source = self.record_factorization()
        sec: dict = {"factorization": source, "d_s": fact.d_s, "d_e": fact.d_e}
        try:
            zf = extract_z(tree, fact)
            rs = construct_records(zf, tree)
        except (StrongDecoherenceError, NotSystemLocalError) as exc:
            sec["error"] = str(exc)
            self.report["records"] = sec
            self.gate("records", False, self.sc.assert_checks)
            print(f"records: {'FAIL' if self.sc.assert_checks else 'unavailable'} ({exc})")
            return
        ver = verify_records(rs, tree)
        sec.update(rs.to_dict(), verification=ver.to_dict())
        perm = {}
        for name, (ext, dt) in self.sc.extensions.items():
            d = permanence_check(tree, rs, ext, dt)
            perm[name] = d.to_dict()
            # only extensions satisfying the precondition carry a guarantee
            if d.details["precondition_passed"]:
                self.gate(f"permanence:{name}", d.passed)
        sec["permanence"] = perm
        self.report["records"] = sec
        self.gate("records", ver.passed, self.sc.assert_checks)
        ranks = [int(r) for r in rs.ranks.values()]
        print(f"records: {'pass' if ver.passed else 'FAIL'} ranks={ranks} "
              f"max residual {ver.value:.3e} orthogonality {ver.details['orthogonality_residual']:.3e}")

    def density(self):
        self.tree_section()
        tree = self.tree
        fact, source = self.record_factorization()
        mats = []
        ok = True
        for lab in tree.labels():
            bd = branch_density_matrix(tree, fact, lab)
            d = bd.to_dict()
            d["trace_residual"] = abs(bd.trace - tree.node(lab).probability)
            ok &= d["hermiticity"] <= 1e-12 and d["min_eigenvalue"] >= -1e-10 and d["trace_residual"] <= 1e-10
            mats.append(d)
            write_matrix_csv(self.out / f"rho_{_label(lab)}.csv", bd.rho_s)
        rng = np.random.default_rng(self.cfg.seed)
        ident = expectation_identity_check(tree, fact, np.eye(fact.d_s))
        errs = [expectation_identity_check(tree, fact, random_hermitian(fact.d_s, rng)) for _ in range(N_RANDOM_OBSERVABLES)]
        worst = max(errs, key=lambda d: d.value)
        sec = {"factorization": source, "branches": mats, "identity_observable": ident.to_dict(),
               "random_observables": {"n": N_RANDOM_OBSERVABLES, "seed": self.cfg.seed,
                                      "max_relative_error": worst.value, "worst": worst.to_dict(),
                                      "passed": all(d.passed for d in errs)}}
        self.report["density"] = sec
        self.gate("density", ok)
        self.gate("expectation_identity", sec["random_observables"]["passed"] and ident.passed,
                  self.sc.assert_checks)
        shown = ", ".join(f"{m['trace']:.6g}" for m in mats[:8])
        more = f", ... ({len(mats)} branches)" if len(mats) > 8 else ""
        print(f"density: traces {shown}{more}")
        print(f"expectation identity: max relative error {worst.value:.3e}")

    def refine(self):
        base = self.sc.build_refine_base()
        out, rep = maximal_refine(base, self.sc.candidates, mode=self.sc.refine_mode)
        _, again = maximal_refine(out, self.sc.candidates, mode=self.sc.refine_mode)
        sec = dict(rep.to_dict(), second_pass_accepted=len(again.accepted))
        self.report["refinement"] = sec
        self.gate("refine_idempotent", len(again.accepted) == 0)
        print(f"refine: {len(rep.accepted)} accepted, {len(rep.rejected)} rejected, "
              f"second pass accepted {len(again.accepted)}")

    def run(self) -> int:
        cmd = self.cfg.command
        steps = {
            "check-decoherence": [self.check_decoherence],
            "factor": [self.factor],
            "records": [self.records],
            "density": [self.density],
            "refine": [self.refine],
            "all": [self.check_decoherence, self.factor, self.records, self.density, self.refine],
        }[cmd]
        for step in steps:
            step()
        failed = self.failed()
        doc = {
            "schema": SCHEMA_TAG,
            "version": __version__,
            "command": cmd,
            "config": {"seed": self.cfg.seed, "threads": self.cfg.threads,
                       "tolerances": {"tol_proj": self.sc.tol.tol_proj, "tol_decoh": self.sc.tol.tol_decoh,
                                      "tol_rank": self.sc.tol.tol_rank}},
            "scenario": self.sc.to_dict(),
        }
        doc.update(self.report)
        doc["status"] = {"passed": not failed, "checks": self.checks}
        write_json(self.out / "report.json", doc)
        print(f"{'PASS' if not failed else 'FAIL'}: report written to {self.out / 'report.json'}")
        return EXIT_FAIL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="realms", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="action", required=True)
    run = sub.add_parser("run", help="run a scenario")
    run.add_argument("--scenario", required=True, help="scenario JSON file or shipped scenario name")
    run.add_argument("--out", default="realms-out", help="output directory")
    run.add_argument("--tol-decoh", type=float, default=None)
    run.add_argument("--tol-proj", type=float, default=None)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--threads", type=int, default=None)
    run.add_argument("command", choices=SUBCOMMANDS)
    return p


def _setup_logging():
    level = os.environ.get("REALM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def run(cfg: RunConfig) -> int:
    try:
        sc = load_scenario(cfg.scenario, {"tol_decoh": cfg.tol_decoh, "tol_proj": cfg.tol_proj})
    except (ScenarioError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    try:
        if cfg.threads is not None:
            with threadpool_limits(limits=cfg.threads):
                return Runner(cfg, sc).run()
        return Runner(cfg, sc).run()
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PARSE if exc.code else EXIT_OK
    cfg = RunConfig(scenario=args.scenario, command=args.command, out=args.out, tol_decoh=args.tol_decoh,
                    tol_proj=args.tol_proj, seed=args.seed, threads=args.threads)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
