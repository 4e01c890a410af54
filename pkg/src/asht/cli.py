"""Command-line entry point: ``asht {solve,simulate,sweep,diagnose}``.

Exit codes: 0 success, 2 usage or validation error, 3 internal invariant
violation.  Settings resolve as flags > ``--config`` JSON file > defaults;
the base seed additionally falls back to ``$ASHT_SEED``.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .design import DesignSolution, solve_design, theoretical_bounds
from .engine import DEFAULT_N_MAX, SwitchCostMatrix
from .errors import ASHTError, InvariantViolation
from .experiments import (
    CELL_COLUMNS,
    CellResult,
    ExperimentConfig,
    config_hash,
    default_workers,
    run_batch,
    run_diagnostics,
    run_trials,
)
from .obs_models import Model, discrimination_mask, load_model
from .policies import PolicyConfig, PolicyKind

EXIT_OK, EXIT_USAGE, EXIT_INTERNAL = 0, 2, 3

POLICY_ALIASES = {
    "procedure_a": PolicyKind.PROCEDURE_A,
    "sluggish_a": PolicyKind.SLUGGISH_A,
    "stop_only_at": PolicyKind.STOP_ONLY_AT,
    "sluggish_a_stop_only_at": PolicyKind.STOP_ONLY_AT,
    "non_stopping": PolicyKind.NON_STOPPING,
    "sluggish_a_non_stopping": PolicyKind.NON_STOPPING,
    "epsilon_uniform": PolicyKind.EPSILON_UNIFORM,
}

DEFAULTS: dict[str, Any] = {
    "policy": "sluggish_a",
    "eta": 1.0,
    "epsilon": 0.1,
    "stop_at": None,
    "hypothesis": 0,
    "L": 1e4,
    "trials": 1000,
    "n_max": DEFAULT_N_MAX,
    "L_grid": "1e2,1e3,1e4",
    "eta_grid": "1",
    "hypotheses": None,
    "horizon": 200,
    "k_const": 0.0,
    "switch_cost": None,
    "costs": None,
}


class UsageError(ASHTError):
    pass


@dataclass
class RunManifest:
    config_hash: str
    version: str
    base_seed: int | None
    outputs: list[str] = field(default_factory=list)
    started_at: str = ""
    finished_at: str = ""

    def header(self) -> dict[str, Any]:
        """Deterministic part embedded in every output file."""
        return {"config_hash": self.config_hash, "version": self.version, "base_seed": self.base_seed}

    def to_json_dict(self) -> dict[str, Any]:
        d = self.header()
        d.update(outputs=self.outputs, started_at=self.started_at, finished_at=self.finished_at)
        return d


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def bundled_models() -> dict[str, Path]:
    root = resources.files("asht") / "models"
    return {Path(p.name).stem: Path(str(p)) for p in root.iterdir() if p.name.endswith(".json")}


def resolve_model_path(ref: str) -> Path:
    p = Path(ref)
    if p.exists():
        return p
    bundled = bundled_models()
    if ref in bundled:
        return bundled[ref]
    raise UsageError(f"model {ref!r} is neither a file nor a bundled model ({', '.join(sorted(bundled))})")


def _read_model(ref: str) -> Model:
    return load_model(resolve_model_path(ref))


def _floats(text: str | Sequence[float] | None, what: str) -> list[float]:
    if text is None:
        return []
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"{what}: {exc}") from None


def _settings(args: argparse.Namespace, keys: Sequence[str]) -> dict[str, Any]:
    cfg: dict[str, Any] = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
    out = {}
    for k in keys:
        v = getattr(args, k, None)
        if v is None:
            v = cfg.get(k, DEFAULTS.get(k))
        out[k] = v
    seed = getattr(args, "seed", None)
    if seed is None:
        seed = cfg.get("seed")
    if seed is None:
        seed = int(os.environ.get("ASHT_SEED", "0"))
    out["seed"] = int(seed)
    return out


def _costs(model: Model, s: dict[str, Any]) -> SwitchCostMatrix:
    if s.get("costs"):
        with open(s["costs"], encoding="utf-8") as fh:
            return SwitchCostMatrix(np.asarray(json.load(fh)["g"], dtype=np.float64))
    if s.get("switch_cost") is not None:
        return SwitchCostMatrix.uniform(model.num_actions, float(s["switch_cost"]))
    return SwitchCostMatrix.zeros(model.num_actions)


def _kind(name: str) -> PolicyKind:
    try:
        return POLICY_ALIASES[name]
    except KeyError:
        raise UsageError(f"unknown policy {name!r}; choose from {sorted(POLICY_ALIASES)}") from None


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _write_manifest(manifest: RunManifest, path: Path) -> None:
    manifest.finished_at = _now()
    _write_text(path, _dump(manifest.to_json_dict()))


# ---------------------------------------------------------------------------
# solve


def solve_report(model: Model, design: DesignSolution, L: float, eta: float, g_max: float) -> dict[str, Any]:
    mask = discrimination_mask(model)
    M = model.num_hypotheses
    pairs = {f"{i},{j}": [int(a) for a in np.flatnonzero(mask[i, j])] for i in range(M) for j in range(M) if i != j}
    bounds = theoretical_bounds(design, L, eta, g_max)
    out = design.to_json_dict()
    out["A_ij"] = pairs
    out["conditions"] = {
        "bounded_llr": "satisfied: finite alphabet with strictly positive pmfs bounds every log-ratio",
        "pairwise_separable": all(len(v) > 0 for v in pairs.values()),
        "positive_discrimination_mass": design.has_positive_beta,
    }
    out["bounds"] = bounds.to_json_dict()
    return out


def cmd_solve(args: argparse.Namespace) -> int:
    model = _read_model(args.model)
    design = solve_design(model)
    s = _settings(args, ["L", "eta", "switch_cost", "costs"])
    g = _costs(model, s)
    report = solve_report(model, design, float(s["L"]), float(s["eta"]), g.g_max)
    manifest = RunManifest(config_hash({"model": model.to_json_dict(), "cmd": "solve"}), __version__, None)
    report["manifest"] = manifest.header()
    if args.json or args.out:
        text = _dump(report)
        if args.out:
            _write_text(Path(args.out), text)
        if args.json:
            sys.stdout.write(text)
        return EXIT_OK

    names = model.hypotheses
    print(f"model: M={model.num_hypotheses} K={model.num_actions} S={model.alphabet_size}")
    for i, name in enumerate(names):
        lam = ", ".join(f"{model.actions[a]}:{w:.6g}" for a, w in enumerate(design.lambdas[i]))
        print(f"  {name}: D = {design.D[i]:.6f} nats   lambda = ({lam})")
    print(f"beta = {design.beta:.6g} (argmin i,j,k = {design.beta_argmin})")
    print("discriminating actions A_ij:")
    for key, acts in report["A_ij"].items():
        i, j = (int(v) for v in key.split(","))
        if i < j:
            print(f"  {names[i]} vs {names[j]}: {[model.actions[a] for a in acts]}")
    a = report["conditions"]
    print("conditions: bounded log-ratios (automatic for finite positive pmfs); "
          f"every pair separable {'pass' if a['pairwise_separable'] else 'FAIL'}; "
          f"positive discrimination mass {'pass' if a['positive_discrimination_mass'] else 'FAIL (beta = 0)'}")
    if not a["positive_discrimination_mass"]:
        print("  warning: beta = 0; consider the epsilon_uniform policy")
    b = report["bounds"]
    print(f"bounds at L={b['L']:g}, eta={b['eta']:g}, g_max={b['g_max']:g} (threshold {b['threshold']:.4f} nats):")
    for h in b["per_hypothesis"]:
        print(
            f"  {names[h['hypothesis']]}: lower slope 1/D = {h['lower_slope']:.4f}, "
            f"cost slope (1+g_max*eta)/D = {h['cost_slope']:.4f}, error <= {h['error_ceiling']:.3g}, "
            f"gamma = {h['gamma']:.4g}"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args: argparse.Namespace) -> int:
    s = _settings(args, ["policy", "eta", "epsilon", "stop_at", "hypothesis", "L", "trials", "n_max", "switch_cost", "costs"])
    trials = int(s["trials"])
    if trials < 1:
        raise UsageError(f"--trials must be >= 1, got {trials}")
    model = _read_model(args.model)
    design = solve_design(model)
    kind = _kind(s["policy"])
    policy = PolicyConfig(
        kind, design.lambdas, L=float(s["L"]), eta=float(s["eta"]), epsilon=float(s["epsilon"]),
        stop_at=None if s["stop_at"] is None else int(s["stop_at"]),
    )
    costs = _costs(model, s)
    hyp = int(s["hypothesis"])
    payload = {
        "cmd": "simulate",
        "model": model.to_json_dict(),
        "policy": policy.to_json_dict(),
        "costs": costs.to_json_dict(),
        "hypothesis": hyp,
        "trials": trials,
        "seed": s["seed"],
        "n_max": int(s["n_max"]),
    }
    manifest = RunManifest(config_hash(payload), __version__, s["seed"], started_at=_now())
    batch = run_trials(
        model, policy, costs, hyp, trials=trials, base_seed=s["seed"], n_max=int(s["n_max"]),
        workers=args.workers or default_workers(),
    )
    if np.any(batch.total_cost != batch.tau + batch.switch_cost):
        raise InvariantViolation("total_cost != tau + switch_cost")

    cell = CellResult.from_batch(batch, policy.L, 0)
    summary = {
        "manifest": manifest.header(),
        "config": payload | {"model": None},
        "cell": cell.csv_row(),
        "censored": cell.censored,
    }
    out = Path(args.out)
    header = [f"{k}: {v}" for k, v in manifest.header().items()]
    _write_text(out, batch.to_csv(header))
    summary_path = Path(args.summary) if args.summary else out.with_suffix(".summary.json")
    _write_text(summary_path, _dump(summary))
    manifest.outputs = [str(out), str(summary_path)]
    _write_manifest(manifest, out.with_suffix(".manifest.json"))
    row = cell.csv_row()
    print(
        f"{trials} trials under {model.hypotheses[hyp]}: error {row['error_rate']:.4g}, "
        f"mean tau {row['mean_tau']:.4f}, mean cost {row['mean_total_cost']:.4f}, "
        f"censored {cell.censored}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(args: argparse.Namespace) -> int:
    s = _settings(args, ["policy", "epsilon", "stop_at", "L_grid", "eta_grid", "trials", "n_max", "hypotheses", "switch_cost", "costs"])
    L_grid = _floats(s["L_grid"], "--L-grid")
    eta_grid = _floats(s["eta_grid"], "--eta-grid")
    if not L_grid:
        raise UsageError("--L-grid is empty")
    if not eta_grid:
        raise UsageError("--eta-grid is empty")
    trials = int(s["trials"])
    if trials < 1:
        raise UsageError(f"--trials must be >= 1, got {trials}")
    model = _read_model(args.model)
    design = solve_design(model)
    costs = _costs(model, s)
    hyps = None if s["hypotheses"] is None else tuple(int(v) for v in _floats(s["hypotheses"], "--hypotheses"))
    kind = _kind(s["policy"])
    out_dir = Path(args.out_dir)
    base = ExperimentConfig(
        model, design, kind, eta=1.0, epsilon=float(s["epsilon"]),
        stop_at=None if s["stop_at"] is None else int(s["stop_at"]),
        costs=costs, L_grid=tuple(L_grid), trials=trials, base_seed=s["seed"], n_max=int(s["n_max"]),
        hypotheses=hyps,
    )
    payload = {"cmd": "sweep", "config": base.to_json_dict(), "eta_grid": eta_grid}
    manifest = RunManifest(config_hash(payload), __version__, s["seed"], started_at=_now())
    workers = args.workers or default_workers()

    rows, results = [], {}
    for eta in eta_grid:
        res = run_batch(dataclasses.replace(base, eta=eta), workers=workers)
        results[eta] = res
        lines = [",".join(("eta",) + CELL_COLUMNS)]
        for c in res.cells:
            r = c.csv_row()
            lines.append(",".join([repr(eta)] + [repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in CELL_COLUMNS]))
        cells_path = out_dir / f"cells_eta{eta:g}.csv"
        header = "".join(f"# {k}: {v}\n" for k, v in manifest.header().items())
        _write_text(cells_path, header + "\n".join(lines) + "\n")
        manifest.outputs.append(str(cells_path))
        for sm in res.summaries:
            rows.append({
                "eta": eta,
                "hypothesis": sm.hypothesis,
                "tau_slope": None if sm.tau_fit is None else sm.tau_fit.slope,
                "tau_slope_se": None if sm.tau_fit is None else sm.tau_fit.stderr,
                "cost_slope": None if sm.cost_fit is None else sm.cost_fit.slope,
                "cost_slope_se": None if sm.cost_fit is None else sm.cost_fit.stderr,
                "reference_1_over_D": sm.lower_slope,
                "reference_cost_ceiling": sm.cost_ceiling,
                "reference_epsilon_slope": sm.epsilon_reference,
            })

    summary = {
        "manifest": manifest.header(),
        "slopes": rows,
        "batches": {f"{eta:g}": res.to_json_dict() for eta, res in results.items()},
    }
    summary_path = out_dir / "summary.json"
    _write_text(summary_path, _dump(summary))
    manifest.outputs.append(str(summary_path))
    _write_manifest(manifest, out_dir / "manifest.json")

    print(f"{'eta':>6} {'hyp':>4} {'tau slope':>18} {'cost slope':>18} {'1/D':>8} {'(1+g*eta)/D':>12}")
    for r in rows:
        def fmt(v: float | None, se: float | None) -> str:
            return "n/a" if v is None else f"{v:.4f}+-{se:.4f}"
        print(
            f"{r['eta']:>6g} {model.hypotheses[r['hypothesis']]:>4} {fmt(r['tau_slope'], r['tau_slope_se']):>18} "
            f"{fmt(r['cost_slope'], r['cost_slope_se']):>18} {r['reference_1_over_D']:>8.4f} "
            f"{r['reference_cost_ceiling']:>12.4f}"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# diagnose


def cmd_diagnose(args: argparse.Namespace) -> int:
    s = _settings(args, ["hypothesis", "horizon", "trials", "eta", "k_const"])
    horizon = int(s["horizon"])
    if horizon < 1:
        raise UsageError(f"--horizon must be >= 1, got {horizon}")
    trials = int(s["trials"])
    if trials < 1:
        raise UsageError(f"--trials must be >= 1, got {trials}")
    model = _read_model(args.model)
    design = solve_design(model)
    report = run_diagnostics(
        model, design, int(s["hypothesis"]), eta=float(s["eta"]), horizon=horizon, trials=trials,
        base_seed=s["seed"], k_const=float(s["k_const"]), workers=args.workers or default_workers(),
    )
    payload = {"cmd": "diagnose", "model": model.to_json_dict(), **{k: s[k] for k in ("hypothesis", "horizon", "trials", "eta", "k_const", "seed")}}
    manifest = RunManifest(config_hash(payload), __version__, s["seed"])
    out = report.to_json_dict()
    out["manifest"] = manifest.header()
    if args.out:
        _write_text(Path(args.out), _dump(out))
    if args.json:
        sys.stdout.write(_dump(out))
        return EXIT_OK
    print(f"never-stopping runs: {trials} trials, horizon {horizon}, eta {report.eta:g}, "
          f"true hypothesis {model.hypotheses[report.hypothesis]}")
    print(f"analytic decay rate gamma = {report.gamma:.5g} (s* = {report.s_star})")
    for label, fit in (("margin tail", report.margin_fit), ("settlement tail", report.settlement_fit)):
        if fit is None:
            print(f"  {label}: not fitted")
        elif fit.degenerate:
            print(f"  {label}: degenerate (instant settlement), decay = +inf")
        else:
            verdict = "ok" if report.passes(fit) else "SLOWER than analytic bound"
            print(f"  {label}: log-slope {fit.slope:.5f} +- {fit.stderr:.5f} over {fit.n_points} steps ({verdict})")
    for note in report.notes:
        print(f"  note: {note}")
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="asht", description="Active sequential hypothesis testing with switching costs.")
    p.add_argument("--version", action="version", version=f"asht {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("model", help="model JSON path or bundled model name")
        sp.add_argument("--config", help="JSON file of default settings (flags override it)")

    def cost_flags(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--costs", help='switch cost JSON {"g": [[...]]}')
        sp.add_argument("--switch-cost", type=float, dest="switch_cost", help="uniform off-diagonal switch cost")

    sp = sub.add_parser("solve", help="solve the max-min design and report bounds")
    common(sp)
    sp.add_argument("--json", action="store_true", help="machine-readable output")
    sp.add_argument("--out", help="also write the JSON report here")
    sp.add_argument("--L", type=float, dest="L")
    sp.add_argument("--eta", type=float)
    cost_flags(sp)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("simulate", help="run one (hypothesis, L) cell")
    common(sp)
    sp.add_argument("--policy")
    sp.add_argument("--eta", type=float)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--stop-at", type=int, dest="stop_at")
    sp.add_argument("--hypothesis", type=int)
    sp.add_argument("--L", type=float, dest="L")
    sp.add_argument("--trials", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n-max", type=int, dest="n_max")
    sp.add_argument("--out", required=True, help="trial CSV path")
    sp.add_argument("--summary", help="summary JSON path (default: next to --out)")
    sp.add_argument("--workers", type=int)
    cost_flags(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep", help="batches over an L grid and an eta grid, with slope fits")
    common(sp)
    sp.add_argument("--policy")
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--stop-at", type=int, dest="stop_at")
    sp.add_argument("--L-grid", dest="L_grid")
    sp.add_argument("--eta-grid", dest="eta_grid")
    sp.add_argument("--hypotheses")
    sp.add_argument("--trials", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n-max", type=int, dest="n_max")
    sp.add_argument("--out-dir", dest="out_dir", required=True)
    sp.add_argument("--workers", type=int)
    cost_flags(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("diagnose", help="tail diagnostics from never-stopping runs")
    common(sp)
    sp.add_argument("--hypothesis", type=int)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--k-const", type=float, dest="k_const")
    sp.add_argument("--json", action="store_true")
    sp.add_argument("--out")
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_diagnose)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"InvariantViolation: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except ASHTError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
