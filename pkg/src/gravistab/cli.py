"""Command-line entry point: build models, run check suites and particle evolutions.

Exit codes: 0 pass, 2 check failure, 3 numerical blow-up, 64 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numba
import numpy as np

from . import __version__
from . import checks
from . import dynamics as dyn
from .equilibria import King, NonCompactSupport, Polytrope, build_equilibrium, sample_particles, \
    self_consistency_residual
from .storage import dump_json, ensure_dir, load_model, model_document, save_model

INTERFACE_VERSION = "1.0"
EXIT_OK, EXIT_FAIL, EXIT_BLOWUP, EXIT_USAGE = 0, 2, 3, 64

# equilibrium residual thresholds: bulk moment, outer 1% of support, Poisson
BUILD_TOLERANCES = {"moment": 1e-6, "moment_outer": 1e-4, "poisson": 1e-6}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# ---------------------------------------------------------------------------
# run configuration

def _format_value(v) -> str:
    if isinstance(v, bool) or v is None or isinstance(v, (int, float)):
        return json.dumps(v)
    s = str(v)
    try:
        json.loads(s)
    except ValueError:
        if s.strip() == s and "\n" not in s and s:
            return s
    return json.dumps(s)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


@dataclass
class RunConfig:
    """Resolved parameters of one command; round-trips through a flat key=value text form."""
    command: str
    params: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        for k, v in self.params.items():
            if k.endswith("tol") and v is not None and not v > 0:
                raise ValueError(f"tolerance {k} must be positive")
        seed = self.params.get("seed")
        if seed is not None and not (isinstance(seed, int) and 0 <= seed < 2 ** 64):
            raise ValueError("seed must be an integer in [0, 2^64)")
        return self

    def to_text(self) -> str:
        lines = [f"command={_format_value(self.command)}"]
        lines += [f"{k}={_format_value(self.params[k])}" for k in sorted(self.params)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = read_config_text(text)
        command = values.pop("command", "")
        return cls(str(command), values)


def read_config_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key=value")
        key, val = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if not key:
            raise UsageError(f"config line {n}: empty key")
        out[key] = _parse_value(val.strip())
    return out


# ---------------------------------------------------------------------------
# parser

def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _seed(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64)")
    return v


def _perturbation(text):
    if text in ("", "none"):
        return None
    kind, _, amp = text.partition(":")
    if kind not in dyn.STABILITY_KINDS or not amp:
        raise argparse.ArgumentTypeError(f"expected KIND:AMPLITUDE with KIND in {', '.join(dyn.STABILITY_KINDS)}")
    return f"{kind}:{float(amp)!r}"


def _common(p):
    p.add_argument("--config", help="flat key=value file; explicit flags take precedence")
    p.add_argument("--threads", type=_positive_int, default=1, help="worker threads for force loops")


def _run_options(p, default_t):
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--n", type=_positive_int, default=100000, help="number of particles")
    p.add_argument("--t", type=_positive_float, default=default_t, help="duration in dynamical times")
    p.add_argument("--dt", type=_positive_float, default=None, help="step in dynamical times (default 1/200)")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--cadence", type=_positive_int, default=10, help="steps between diagnostics records")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gravistab", description="Steady states of self-gravitating collisionless systems.")
    parser.add_argument("--version", action="store_true", help="print version information and exit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    model = sub.add_parser("model", help="equilibrium models")
    msub = model.add_subparsers(dest="action", parser_class=_Parser)
    b = msub.add_parser("build", help="build an equilibrium and write its model directory")
    _common(b)
    b.add_argument("--law", choices=("king", "polytrope"), required=True)
    b.add_argument("--n", type=float, default=None, help="polytropic index")
    b.add_argument("--cf", type=_positive_float, default=1.0, help="polytrope amplitude C_F")
    b.add_argument("--uc", type=_positive_float, default=1.0, help="central potential depth E0 - phi(0)")
    b.add_argument("--nodes", type=_positive_int, default=2048, help="radial grid nodes")
    b.add_argument("--out", required=True, help="output directory")
    b.set_defaults(handler=cmd_model_build)

    c = sub.add_parser("check", help="run a verification suite against a model")
    _common(c)
    c.add_argument("name", choices=checks.CHECKS)
    c.add_argument("--model", required=True, help="model directory")
    c.add_argument("--samples", type=_positive_int, default=None, help="random fields per test")
    c.add_argument("--seed", type=_seed, default=0)
    c.add_argument("--out", default=None, help="report path (default: print to stdout)")
    c.set_defaults(handler=cmd_check)

    e = sub.add_parser("evolve", help="evolve a sampled (optionally perturbed) equilibrium")
    _common(e)
    _run_options(e, 20.0)
    e.add_argument("--solver", choices=("radial", "direct", "multipole", "external"), default="radial")
    e.add_argument("--eps", type=_positive_float, default=None, help="softening length for the direct solver")
    e.add_argument("--perturb", type=_perturbation, default=None, help="KIND:AMPLITUDE, e.g. scale:0.01")
    e.add_argument("--snapshot-csv", action="store_true", help="also write CSV copies of the snapshots")
    e.set_defaults(handler=cmd_evolve)

    s = sub.add_parser("stability", help="perturb an equilibrium and track its distance to the orbit")
    _common(s)
    _run_options(s, 20.0)
    s.set_defaults(cadence=20)
    s.add_argument("--kind", choices=dyn.STABILITY_KINDS, default="scale")
    s.add_argument("--eta", type=float, default=0.01, help="perturbation amplitude")
    s.add_argument("--solver", choices=("auto", "radial", "direct", "multipole"), default="auto")
    s.add_argument("--factor", type=_positive_float, default=5.0, help="bound on distance / initial distance")
    s.set_defaults(handler=cmd_stability)
    return parser


def _subparser_for(parser, argv):
    """The leaf parser selected by argv, or None when no complete command is given."""
    node = parser
    rest = list(argv)
    while True:
        actions = [a for a in node._actions if isinstance(a, argparse._SubParsersAction)]
        if not actions:
            return node
        choices = actions[0].choices
        idx = next((i for i, a in enumerate(rest) if a in choices), None)
        if idx is None:
            return None
        node = choices[rest[idx]]
        rest = rest[idx + 1:]


def _find_config(argv):
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv):
    parser = build_parser()
    cfg_path = _find_config(argv)
    if cfg_path is not None:
        leaf = _subparser_for(parser, argv)
        if leaf is None:
            raise UsageError("--config needs a command")
        try:
            values = read_config_text(Path(cfg_path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}")
        values.pop("command", None)
        known = {a.dest: a for a in leaf._actions}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        for key, val in values.items():
            act = known[key]
            if act.type is not None and val is not None and not isinstance(val, bool):
                try:
                    val = act.type(str(val))
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise UsageError(f"config key {key}: {exc}")
            if act.choices is not None and val not in act.choices:
                raise UsageError(f"config key {key}: {val!r} not in {sorted(act.choices)}")
            act.required = False
            leaf.set_defaults(**{key: val})
    return parser, parser.parse_args(argv)


def run_config(args) -> RunConfig:
    skip = {"handler", "config", "version", "command", "action"}
    params = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    cmd = args.command if getattr(args, "action", None) is None else f"{args.command} {args.action}"
    return RunConfig(cmd, params).validate()


def set_threads(n: int) -> int:
    k = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(k)
    return k


# ---------------------------------------------------------------------------
# commands

def _load(path):
    try:
        return load_model(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load model from {path}: {exc}")


def cmd_model_build(args) -> int:
    if args.law == "polytrope":
        if args.n is None:
            raise UsageError("--law polytrope requires --n")
        law = Polytrope(args.n, args.cf)
    else:
        law = King()
    try:
        model = build_equilibrium(law, args.uc, n_nodes=args.nodes)
    except NonCompactSupport:
        print("error: non-compact support: the density does not vanish at finite radius", file=sys.stderr)
        return EXIT_FAIL
    moment, poisson, outer = self_consistency_residual(model)
    values = {"moment": moment, "moment_outer": outer, "poisson": poisson}
    items = [checks.item(k, values[k], BUILD_TOLERANCES[k], values[k] <= BUILD_TOLERANCES[k])
             for k in ("moment", "moment_outer", "poisson")]
    report = checks.suite("model-build", items, model=model_document(model))
    out = ensure_dir(args.out)
    save_model(model, out)
    dump_json(out / "build_report.json", report)
    (out / "config.txt").write_text(run_config(args).to_text())
    print(f"model written to {out}: R = {model.R:.12g}, M = {model.M:.12g}; residuals {report['verdict']}")
    return EXIT_OK if report["verdict"] == "pass" else EXIT_FAIL


def cmd_check(args) -> int:
    model = _load(args.model)
    report = checks.run_check(args.name, model, args.samples, args.seed)
    report["seed"] = int(args.seed)
    if args.out:
        out = Path(args.out)
        if out.parent != Path(""):
            ensure_dir(out.parent)
        dump_json(out, report)
    else:
        print(json.dumps(report, sort_keys=True, indent=2, allow_nan=False))
    failed = [it["form"] for it in report["items"] if it["verdict"] != "pass"]
    for form in failed:
        print(f"FAIL: {form}", file=sys.stderr)
    print(f"check {args.name}: {report['verdict']}", file=sys.stderr)
    return EXIT_OK if report["verdict"] == "pass" else EXIT_FAIL


def _write_records(out, records, name="diagnostics.csv"):
    dyn.write_diagnostics_csv(out / name, records)


def _report_blowup(out, exc) -> int:
    _write_records(out, exc.records)
    last = exc.records[-1] if exc.records else None
    print(f"error: numerical blow-up: {exc}", file=sys.stderr)
    if last is not None:
        row = ", ".join(f"{k}={v!r}" for k, v in zip(dyn.DiagnosticsRecord.FIELDS, last.row()))
        print(f"last record: {row}", file=sys.stderr)
    return EXIT_BLOWUP


def _summary(records):
    H0 = records[0].H
    return {
        "t_final": float(records[-1].t),
        "H_initial": float(H0),
        "H_final": float(records[-1].H),
        "H_drift_max": float(max(abs(r.H - H0) for r in records) / abs(H0)),
        "mass_initial": float(records[0].mass),
        "mass_final": float(records[-1].mass),
        "records": len(records),
    }


def cmd_evolve(args) -> int:
    model = _load(args.model)
    td = dyn.dynamical_time(model)
    dt = (args.dt if args.dt is not None else 1.0 / 200.0) * td
    T = args.t * td
    solver = dyn.make_solver(args.solver, model, args.n, args.eps)
    out = ensure_dir(args.out)
    (out / "config.txt").write_text(run_config(args).to_text())
    e = dyn.recenter(sample_particles(model, args.n, args.seed))
    pert = None
    if args.perturb:
        kind, _, amp = args.perturb.partition(":")
        dyn.perturb(e, model, kind, float(amp))
        pert = {"kind": kind, "amplitude": float(amp)}
    dyn.write_snapshot(out / "initial.bin", e)
    if args.snapshot_csv:
        dyn.write_snapshot_csv(out / "initial.csv", e)
    try:
        records = dyn.evolve(e, solver, dt, T, args.cadence, model)
    except dyn.EvolutionBlowup as exc:
        return _report_blowup(out, exc)
    _write_records(out, records)
    dyn.write_snapshot(out / "final.bin", e)
    if args.snapshot_csv:
        dyn.write_snapshot_csv(out / "final.csv", e)
    doc = {"command": "evolve", "solver": args.solver, "N": int(args.n), "seed": int(args.seed),
           "dt": float(dt), "T": float(T), "t_dyn": float(td), "perturbation": pert,
           "summary": _summary(records)}
    dump_json(out / "run.json", doc)
    print(f"evolved {args.n} particles to t = {records[-1].t:.6g}; relative H drift {doc['summary']['H_drift_max']:.3g}")
    return EXIT_OK


def cmd_stability(args) -> int:
    model = _load(args.model)
    td = dyn.dynamical_time(model)
    dt = (args.dt if args.dt is not None else 1.0 / 200.0) * td
    solver = None if args.solver == "auto" else dyn.make_solver(args.solver, model, args.n)
    out = ensure_dir(args.out)
    (out / "config.txt").write_text(run_config(args).to_text())
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            res = dyn.stability_experiment(model, args.kind, args.eta, args.n, args.t * td, args.seed,
                                           solver=solver, dt=dt, cadence=args.cadence, factor=args.factor)
        except dyn.EvolutionBlowup as exc:
            return _report_blowup(out, exc)
    _write_records(out, res.records)
    with open(out / "distance.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t", "dist", "z1", "z2", "z3"])
        for t, d, z in zip(res.times, res.distances, res.shifts):
            wr.writerow([repr(float(t)), repr(float(d)), *(repr(float(x)) for x in z)])
    doc = {"command": "stability", "kind": args.kind, "amplitude": float(args.eta), "N": int(args.n),
           "seed": int(args.seed), "solver": args.solver, "dt": float(dt), "T": float(args.t * td),
           "t_dyn": float(td), "factor": float(args.factor), "ratio": res.ratio,
           "initial_distance": float(res.distances[0]), "max_distance": float(np.max(res.distances)),
           "boost": [float(x) for x in res.boost], "hypotheses": res.hypotheses,
           "exploration": bool(caught), "verdict": res.verdict, "summary": _summary(res.records)}
    dump_json(out / "stability.json", doc)
    (out / "verdict.txt").write_text(res.verdict + "\n")
    print(f"verdict: {res.verdict} (max distance / initial = {res.ratio:.4g})")
    return EXIT_OK if res.verdict == "bounded" else EXIT_FAIL


def main(argv: Optional[list] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        parser, args = parse_args(argv)
        if args.version:
            print(f"gravistab {__version__} (interface {INTERFACE_VERSION})")
            return EXIT_OK
        if getattr(args, "handler", None) is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        set_threads(args.threads)
        return args.handler(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
