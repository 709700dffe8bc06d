"""Command-line driver: centralized solves, Schwarz runs, sensitivity profiles.

Exit codes: 0 ok, 2 bad input, 3 infeasible, 4 iteration cap, 5 diverged.
Every command writes ``<command>.manifest.json`` next to its outputs; the
``rerun`` command replays a manifest.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dcopf import CaseParseError, InconsistentReferenceError, OpfModel, OpfOptions, build_qp, case_to_text, load_case, synthetic_case
from .diagnostics import SizeLimitError, decay_profile, parse_delta
from .graph import GraphError, expand, partition
from .kernel import SolverConfig, Status, solve
from .model import ModelError, PrimalDualPoint, assemble, kkt_residual, load_blockqp, save_blockqp
from .schwarz import SchwarzConfig, SchwarzStatus, SubdomainInfeasibleError, schwarz_solve
from .synthetic import random_graph_qp, topology

log = logging.getLogger("schwarzqp")

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_MAXITER, EXIT_DIVERGED = 0, 2, 3, 4, 5

_KERNEL_EXIT = {Status.OPTIMAL: EXIT_OK, Status.INFEASIBLE: EXIT_INFEASIBLE, Status.UNBOUNDED: EXIT_INFEASIBLE, Status.MAX_ITER: EXIT_MAXITER}
_SCHWARZ_EXIT = {SchwarzStatus.CONVERGED: EXIT_OK, SchwarzStatus.MAX_OUTER: EXIT_MAXITER, SchwarzStatus.DIVERGED: EXIT_DIVERGED}


class InputError(Exception):
    """Anything wrong with the command line or the input file (exit 2)."""


@dataclass
class RunManifest:
    command: str
    input: str
    input_sha256: str
    config: dict
    outputs: list[str] = field(default_factory=list)
    version: str = __version__
    started: str = ""
    finished: str = ""

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        try:
            doc = json.loads(Path(path).read_text())
            return cls(**doc)
        except (OSError, ValueError, TypeError) as e:
            raise InputError(f"cannot read manifest {path}: {e}") from e


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --------------------------------------------------------------------------- input


def _load(path: str, gamma: float, storage: bool, storage_cost: float):
    """(BlockQP, OpfModel or None) from a ``.m`` case or a BlockQP ``.json``."""
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such file: {path}")
    try:
        if p.suffix == ".m":
            model = build_qp(load_case(p), OpfOptions(gamma=gamma, storage_cost=storage_cost, storage_enabled=storage))
            return model.bqp, model
        if p.suffix == ".json":
            return load_blockqp(p), None
    except (CaseParseError, InconsistentReferenceError, ModelError, GraphError, KeyError, ValueError) as e:
        raise InputError(f"{path}: {e}") from e
    raise InputError(f"{path}: unknown input type (expected .m or .json)")


def _opf_summary(model: OpfModel, z: PrimalDualPoint) -> dict:
    return {
        "objective_dollars": model.objective_dollars(z),
        "dispatch_mw": model.dispatch_mw(z).tolist(),
        "theta_rad": model.theta(z).tolist(),
        "storage_mw": model.storage_mw(z).tolist(),
        "lmp": model.balance_duals(z).tolist(),
        "total_load_mw": model.case.total_load,
    }


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n")


def _omega_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise InputError(f"--omega expects comma-separated integers, got {text!r}") from e
    if not vals or any(v < 0 for v in vals):
        raise InputError("--omega values must be nonnegative integers")
    return vals


def _trace_path(base: Path | None, out: Path, omega: int, ladder: bool) -> Path:
    if base is None:
        return out / f"trace_omega{omega}.csv"
    return base.with_name(f"{base.stem}_omega{omega}{base.suffix}") if ladder else base


# --------------------------------------------------------------------------- commands


def cmd_solve(args) -> int:
    if args.K is not None or args.omega is not None:
        log.warning("--K/--omega are ignored by the centralized solve")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    storage = bool(args.storage) if args.storage is not None else False
    bqp, model = _load(args.input, args.gamma, storage, args.storage_cost)
    V = list(bqp.graph.nodes)
    rep = solve(assemble(bqp, V), SolverConfig(tol_kkt=args.tol_kkt, max_iter=args.max_iter))
    res = kkt_residual(bqp, V, None, rep.point)
    doc = {"status": rep.status.value, "objective": rep.objective, "kkt": res._asdict(), "method": rep.method,
           "iterations": rep.iterations, "point": rep.point.to_dict()}
    if model is not None:
        doc["opf"] = _opf_summary(model, rep.point)
    if not args.reproducible:
        doc["wall_time_s"] = rep.wall_time
    sol = out / "solution.json"
    _write_json(sol, doc)
    print(f"status     {rep.status.value}")
    print(f"objective  {rep.objective:.10g}")
    print(f"kkt max    {res.max():.3e}")
    _manifest(args, "solve", out, [sol.name], started, {"storage": storage})
    return _KERNEL_EXIT[rep.status]


def cmd_schwarz(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    omegas = _omega_list(args.omega)
    storage = bool(args.storage) if args.storage is not None else True
    bqp, model = _load(args.input, args.gamma, storage, args.storage_cost)
    V = list(bqp.graph.nodes)
    if not 1 <= args.K <= len(V):
        raise InputError(f"--K must lie in [1, {len(V)}]")
    if args.workers < 1:
        raise InputError("--workers must be positive")
    base = partition(bqp.graph, args.K, seed=args.seed)
    trace_base = Path(args.trace) if args.trace else None
    if trace_base is not None:
        trace_base.parent.mkdir(parents=True, exist_ok=True)

    rows, outputs, codes = [], [], []
    for om in omegas:
        cfg = SchwarzConfig(omega=om, K=args.K, tol_pr=args.tol_pr, tol_du=args.tol_du, max_outer=args.max_iter,
                            parallelism=args.workers)
        t0 = time.perf_counter()
        try:
            res = schwarz_solve(bqp, V, expand(bqp.graph, base, om), cfg)
        except SubdomainInfeasibleError as e:
            print(f"omega={om}: {e}", file=sys.stderr)
            rows.append((om, "", "", "", "", "infeasible"))
            codes.append(EXIT_INFEASIBLE)
            continue
        wall = time.perf_counter() - t0
        tpath = _trace_path(trace_base, out, om, len(omegas) > 1)
        res.trace.to_csv(tpath, timings=not args.reproducible)
        last = res.trace.records[-1]
        doc = {"omega": om, "status": res.status.value, "iterations": res.trace.iterations,
               "eps_pr": last.eps_pr, "eps_du": last.eps_du, "objective": last.objective,
               "kkt": kkt_residual(bqp, V, None, res.point)._asdict(), "point": res.point.to_dict()}
        if model is not None:
            doc["opf"] = _opf_summary(model, res.point)
        if not args.reproducible:
            doc["wall_time_s"] = wall
        spath = out / f"solution_omega{om}.json"
        _write_json(spath, doc)
        outputs += [str(tpath.resolve()) if trace_base else tpath.name, spath.name]
        rows.append((om, res.trace.iterations, wall, last.eps_pr, last.eps_du, res.status.value))
        codes.append(_SCHWARZ_EXIT[res.status])

    _print_table(rows, args.reproducible)
    _manifest(args, "schwarz", out, outputs, started, {"storage": storage})
    return max(codes)


def _print_table(rows, reproducible: bool) -> None:
    print(f"{'omega':>6} {'iterations':>11} {'time (s)':>10} {'eps_pr':>11} {'eps_du':>11}  status")
    for om, it, wall, epr, edu, st in rows:
        if it == "":
            print(f"{om:>6} {'-':>11} {'-':>10} {'-':>11} {'-':>11}  {st}")
            continue
        w = "-" if reproducible else f"{wall:.2f}"
        print(f"{om:>6} {it:>11} {w:>10} {epr:>11.3e} {edu:>11.3e}  {st}")


def cmd_sensitivity(args) -> int:
    started = _now()
    storage = bool(args.storage) if args.storage is not None else False
    bqp, _ = _load(args.input, args.gamma, storage, args.storage_cost)
    if args.node not in bqp.graph.nodes:
        raise InputError(f"unknown node {args.node} (graph has {bqp.graph.n_nodes} nodes)")
    try:
        delta = parse_delta(args.delta, bqp, args.node)
        prof = decay_profile(bqp, list(bqp.graph.nodes), args.node, delta)
    except (ValueError, SizeLimitError) as e:
        raise InputError(str(e)) from e
    except RuntimeError as e:
        print(str(e), file=sys.stderr)
        return EXIT_INFEASIBLE
    outp = Path(args.out)
    outp.parent.mkdir(parents=True, exist_ok=True)
    prof.to_csv(outp)
    slope, _, r2 = prof.log_fit()
    print(f"Gamma {prof.Gamma:.4e}  rho {prof.rho:.6f}  basis stable {prof.basis_stable}")
    print(f"log-norm slope {slope:.4f} per hop (R^2 {r2:.3f})" if not math.isnan(slope) else "log-norm slope n/a")
    _manifest(args, "sensitivity", outp.parent, [outp.name], started, {"storage": storage})
    return EXIT_OK


def cmd_generate(args) -> int:
    outp = Path(args.output)
    outp.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "opf":
        if outp.suffix != ".m":
            raise InputError("OPF cases are written as .m files")
        outp.write_text(case_to_text(synthetic_case(args.n, seed=args.seed)))
    else:
        if outp.suffix != ".json":
            raise InputError("graph QPs are written as .json files")
        rng = np.random.default_rng(args.seed)
        g = topology(args.topology, args.n, rng)
        save_blockqp(random_graph_qp(g, rng), outp)
    print(f"wrote {outp}")
    return EXIT_OK


def cmd_rerun(args) -> int:
    man = RunManifest.read(args.manifest)
    ns = argparse.Namespace(**man.config)
    if args.out_dir is not None:
        ns.out_dir = args.out_dir
        if getattr(ns, "trace", None):
            ns.trace = str(Path(args.out_dir) / Path(ns.trace).name)
        if getattr(ns, "out", None):
            ns.out = str(Path(args.out_dir) / Path(ns.out).name)
    if man.input_sha256 and Path(ns.input).is_file() and _sha256(Path(ns.input)) != man.input_sha256:
        log.warning("input file changed since the manifest was written")
    return _COMMANDS[man.command](ns)


def _manifest(args, command: str, where: Path, outputs: list[str], started: str, extra: dict) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg.update(extra)
    cfg["input"] = str(Path(args.input).resolve())
    for key in ("out_dir", "trace", "out"):
        if cfg.get(key):
            cfg[key] = str(Path(cfg[key]).resolve())
    man = RunManifest(command, cfg["input"], _sha256(Path(args.input)), cfg, outputs, started=started, finished=_now())
    man.write(where / f"{command}.manifest.json")


_COMMANDS = {"solve": cmd_solve, "schwarz": cmd_schwarz, "sensitivity": cmd_sensitivity}


# --------------------------------------------------------------------------- parser


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("input", help="MATPOWER .m case or BlockQP .json")
    p.add_argument("--gamma", type=float, default=1e5, help="angle regularization weight (OPF input)")
    p.add_argument("--storage", action=argparse.BooleanOptionalAction, default=None,
                   help="add per-bus artificial storage (OPF input; default on for schwarz, off otherwise)")
    p.add_argument("--storage-cost", type=float, default=1e4, help="storage quadratic cost in $/MW^2")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="schwarzqp", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="centralized solve of the whole problem")
    _model_flags(p)
    p.add_argument("--out-dir", "-o", default=".")
    p.add_argument("--tol-kkt", type=float, default=1e-9)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--K", type=int, default=None, help=argparse.SUPPRESS)
    p.add_argument("--omega", default=None, help=argparse.SUPPRESS)
    p.add_argument("--reproducible", action="store_true", help="omit wall times from outputs")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("schwarz", help="overlapping Schwarz solve, one run per overlap")
    _model_flags(p)
    p.add_argument("--out-dir", "-o", default=".")
    p.add_argument("--K", type=int, default=4, help="number of subdomains")
    p.add_argument("--omega", default="1", help="overlap size or comma-separated ladder, e.g. 1,2,4,8")
    p.add_argument("--tol-pr", type=float, default=1e-2)
    p.add_argument("--tol-du", type=float, default=1e2)
    p.add_argument("--max-iter", type=int, default=1000, help="outer iteration cap")
    p.add_argument("--workers", type=int, default=1, help="threads solving subproblems")
    p.add_argument("--trace", default=None, help="trace CSV path (suffixed with _omegaN for a ladder)")
    p.add_argument("--reproducible", action="store_true", help="blank timing columns so outputs are byte-stable")
    p.set_defaults(func=cmd_schwarz)

    p = sub.add_parser("sensitivity", help="node-wise solution change for a local data perturbation")
    _model_flags(p)
    p.add_argument("--node", type=int, required=True, help="perturbed node (0-based; k-th bus row for .m input)")
    p.add_argument("--delta", required=True, help="e.g. f0=0.5,gI1=-1 ; 0 for none")
    p.add_argument("--out", default="sensitivity.csv")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("generate", help="write a synthetic OPF case or graph QP")
    p.add_argument("kind", choices=("opf", "qp"))
    p.add_argument("output")
    p.add_argument("--n", type=int, default=150, help="buses (opf) or nodes (qp)")
    p.add_argument("--topology", choices=("path", "ring", "grid", "random"), default="path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("rerun", help="replay a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out-dir", "-o", default=None, help="write outputs here instead of the original location")
    p.set_defaults(func=cmd_rerun)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
