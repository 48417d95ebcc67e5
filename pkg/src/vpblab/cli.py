"""Experiment orchestration: YAML configs, dispatch, persisted outputs, regression diffs."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .decay_experiments import DecayConfig, run_duhamel_case, run_linear_decay_case, run_torus_case, target_exponent
from .nonlinear_bench import NonlinearConfig, run_nonlinear

KINDS = ("validate", "modes", "decay", "duhamel", "torus", "nonlinear", "stationary")


class ConfigError(ValueError):
    pass


class RunError(RuntimeError):
    pass


@dataclass
class ModesConfig:
    n: int = 3
    order: int = 6
    backend: str = "bgk_surrogate"
    k_samples: tuple = (0.05, 0.5, 1.0, 5.0, 20.0)
    trajectories: int = 20
    horizon: float = 10.0
    tol: float = 1e-6


@dataclass
class StationaryConfig:
    geometry: str = "radial"
    eps: tuple = (1e-3, 5e-4)
    points: int = 801
    radius: float = 20.0
    width: float = 1.0
    tol: float = 1e-10
    tolerance: float = 0.1
    m: int = 2
    theta: float = 1.0


@dataclass
class ExperimentConfig:
    kind: str = "validate"
    seed: int = 0
    out: str = "results"
    decay: DecayConfig = field(default_factory=DecayConfig)
    modes: ModesConfig = field(default_factory=ModesConfig)
    nonlinear: NonlinearConfig = field(default_factory=NonlinearConfig)
    stationary: StationaryConfig = field(default_factory=StationaryConfig)

    @property
    def sigma_target(self) -> float:
        """Exponent the decay run will test against."""
        d = self.decay
        a, ap = d.multi_index("alpha"), d.multi_index("alpha_prime")
        return target_exponent(d.n, d.q, int(np.sum(a - ap)), d.subtract_P0)

    def to_dict(self) -> dict:
        return _plain(asdict(self))


SECTIONS = {"decay": DecayConfig, "modes": ModesConfig, "nonlinear": NonlinearConfig, "stationary": StationaryConfig}


# ---------------------------------------------------------------------------
# parsing


def _plain(obj):
    """JSON/YAML-safe copy: tuples to lists, numpy scalars to Python."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        obj = float(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def _where(node) -> str:
    m = node.start_mark
    return f"line {m.line + 1}, column {m.column + 1}"


def _coerce(name: str, default, value, node):
    where = _where(node)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r} ({where})")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r} ({where})")
        return value
    if isinstance(default, float) or default is None and name.endswith(".dt"):
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r} ({where})")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r} ({where})")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r} ({where})")
        for v in value:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{name}: list entries must be numbers, got {v!r} ({where})")
        return tuple(value)
    return value


def _mapping(node, name):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{name or 'config'}: expected a mapping ({_where(node)})")
    loader = yaml.SafeLoader("")
    for knode, vnode in node.value:
        yield knode, loader.construct_object(knode, deep=True), vnode, loader.construct_object(vnode, deep=True)


def _build(cls, node, prefix):
    known = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    kwargs = {}
    for knode, key, vnode, value in _mapping(node, prefix):
        name = f"{prefix}.{key}" if prefix else str(key)
        if key not in known:
            raise ConfigError(f"unknown key {name!r} ({_where(knode)}); expected one of {sorted(known)}")
        if key in SECTIONS and not prefix:
            kwargs[key] = _build(SECTIONS[key], vnode, key)
        else:
            kwargs[key] = _coerce(name, getattr(defaults, key), value, vnode)
    return cls(**kwargs)


def parse_config(text: str) -> ExperimentConfig:
    """Validated config from YAML text; missing keys take their defaults."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if node is None:
        cfg = ExperimentConfig()
    else:
        cfg = _build(ExperimentConfig, node, "")
    if cfg.kind not in KINDS:
        raise ConfigError(f"kind: unknown experiment {cfg.kind!r}; expected one of {KINDS}")
    return cfg


def serialize_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


# ---------------------------------------------------------------------------
# running


@dataclass
class RunRecord:
    config: dict
    version: str
    wall_time: float
    outputs: list
    summary: dict
    exit_code: int

    @property
    def kind(self) -> str:
        return self.summary.get("kind", self.config.get("kind"))


def _write_csv(path: Path, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def run_validation(seed: int = 0) -> dict:
    """Fast invariant suite over every module; each entry carries its value, tolerance and verdict."""
    from .collision_ops import apply_L, make_backend
    from .mode_dynamics import assemble_mode_operator
    from .nonlinear_bench import NonlinearState, TorusGrid, microscopic_rhs_audit, random_initial_state, solve_poisson
    from .stationary_profile import ProfileGrid, solve_stationary
    from .velocity_space import basis_set, build_grid, moment_table_errors, project

    rng = np.random.default_rng(seed)
    checks = {}

    def put(name, value, tol):
        checks[name] = {"value": float(value), "tol": tol, "passed": bool(value <= tol)}

    g16 = build_grid(3, 16)
    put("moments", max(moment_table_errors(g16).values()), 1e-10)
    g = build_grid(3, 8)
    U = rng.standard_normal((100, g.size))
    P = project(g, U, "P")
    put("projection_idempotent", np.max(np.abs(project(g, P, "P") - P)), 1e-10)
    put("projection_split", np.max(np.abs(project(g, U, "P0") + project(g, U, "P1") - P)), 1e-10)
    basis = basis_set(g).spanning
    micro = project(g, U, "I_minus_P")
    put("micro_orthogonal", np.max(np.abs((micro * g.weights) @ basis.T)), 1e-10)
    be = make_backend("bgk_surrogate", g)
    Lb = apply_L(be, basis)
    put("collision_kernel", np.max(np.abs(Lb)), 1e-10)
    X, Y = U[:2]
    sym = abs(np.sum(g.weights * apply_L(be, X) * Y) - np.sum(g.weights * X * apply_L(be, Y)))
    put("collision_symmetry", sym, 1e-10)
    op0 = assemble_mode_operator(np.zeros(3), be)
    put("mode_k0_stationary", np.max(np.abs(op0.apply(basis.astype(complex)))), 1e-10)
    xg = TorusGrid(32)
    sol = solve_poisson(np.cos(xg.x), xg)
    put("poisson_cosine", np.max(np.abs(sol.grad - np.sin(xg.x))), 1e-12)
    g1 = build_grid(1, 12)
    b1 = make_backend("bgk_surrogate", g1)
    u = random_initial_state(xg, g1, 1e-3, rng)
    put("micro_equation", microscopic_rhs_audit(NonlinearState(u, 0.0, xg, g1), b1).relative, 1e-8)
    put("stationary_flat", solve_stationary(1.0, ProfileGrid("radial", 101)).sup, 1e-14)
    return checks


def _dispatch(cfg: ExperimentConfig, outdir: Path):
    """Run one experiment; returns (summary dict, csv rows, passed)."""
    kind = cfg.kind
    if kind == "validate":
        checks = run_validation(cfg.seed)
        rows = [("check", "value", "tol", "passed")] + [(k, v["value"], v["tol"], v["passed"]) for k, v in checks.items()]
        passed = all(v["passed"] for v in checks.values())
        return {"kind": kind, "passed": passed, "checks": checks}, rows, passed
    if kind == "modes":
        from .collision_ops import make_backend
        from .mode_dynamics import audit_suite, calibrate_functional
        from .velocity_space import build_grid

        m = cfg.modes
        g = build_grid(m.n, m.order)
        be = make_backend(m.backend, g)
        params = calibrate_functional(be, k_samples=m.k_samples, seed=cfg.seed)
        rows = audit_suite(be, params, m.k_samples, m.trajectories, cfg.seed + 7, m.horizon, tol=m.tol)
        passed = all(r["worst"] >= -m.tol for r in rows)
        table = [tuple(rows[0])] + [tuple(r.values()) for r in rows]
        return {"kind": kind, "passed": passed, "constants": json.loads(params.to_json()),
                "worst_margin": min(r["worst"] for r in rows)}, table, passed
    if kind in ("decay", "duhamel", "torus"):
        d = dataclasses.replace(cfg.decay, seed=cfg.seed)
        runner = {"decay": run_linear_decay_case, "duhamel": run_duhamel_case, "torus": run_torus_case}[kind]
        rep = runner(d)
        summary = rep.summary()
        if kind == "decay":
            summary["sigma_target"] = cfg.sigma_target
        return summary, rep.csv_rows(), rep.passed
    if kind == "nonlinear":
        rep = run_nonlinear(dataclasses.replace(cfg.nonlinear, seed=cfg.seed))
        rows = rep.ledger.csv_rows() if rep.ledger is not None else [("t",)]
        return rep.summary(), rows, rep.passed
    if kind == "stationary":
        from .stationary_profile import ProfileGrid, bump, scaling_study, solve_stationary

        s = cfg.stationary
        rep = scaling_study(s.geometry, s.eps, s.points, s.radius, s.width, s.tol, s.tolerance, s.m, s.theta)
        center = math.pi if s.geometry == "torus" else 0.0
        prof = solve_stationary(bump(s.eps[0], s.width, center), ProfileGrid(s.geometry, s.points, s.radius), s.tol)
        summary = rep.summary()
        summary["newton_history"] = prof.history
        return summary, prof.csv_rows(), rep.passed
    raise ConfigError(f"unknown kind {kind!r}")


def run(cfg: ExperimentConfig, out: str | Path | None = None) -> RunRecord:
    """Run ``cfg``; writes ``<kind>.csv``, ``summary.json`` and ``config.yaml`` to the output directory."""
    outdir = Path(out or cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        summary, rows, passed = _dispatch(cfg, outdir)
    except ConfigError:
        raise
    except Exception as exc:
        raise RunError(f"{cfg.kind} run failed ({type(exc).__name__}: {exc}); config: {cfg.to_dict()}") from exc
    wall = time.perf_counter() - t0
    summary = _plain(summary)
    summary["passed"] = bool(passed)
    csv_path = outdir / f"{cfg.kind}.csv"
    _write_csv(csv_path, rows)
    json_path = outdir / "summary.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (outdir / "config.yaml").write_text(serialize_config(cfg), encoding="utf-8")
    record = RunRecord(cfg.to_dict(), __version__, wall, [str(csv_path), str(json_path)], summary, 0 if passed else 1)
    (outdir / "record.json").write_text(json.dumps(_plain(asdict(record)), indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return record


# ---------------------------------------------------------------------------
# comparison


def _flatten(d, prefix=""):
    out = {}
    if isinstance(d, dict):
        for k, v in d.items():
            out.update(_flatten(v, f"{prefix}.{k}" if prefix else str(k)))
    elif isinstance(d, list):
        for j, v in enumerate(d):
            out.update(_flatten(v, f"{prefix}[{j}]"))
    else:
        out[prefix] = d
    return out


@dataclass
class DiffReport:
    kind: str
    deltas: dict
    flagged: dict
    missing: list

    @property
    def passed(self) -> bool:
        return not self.flagged and not self.missing

    @property
    def empty(self) -> bool:
        return not self.deltas and not self.missing


def compare(a, b, tolerances: dict | float = 0.0) -> DiffReport:
    """Field-wise diff of two summaries (or run records).

    ``tolerances`` is a scalar or a map from flattened field name (e.g.
    ``fit.value``) to its tolerance, with ``"*"`` as the fallback.
    """
    sa = a.summary if isinstance(a, RunRecord) else a
    sb = b.summary if isinstance(b, RunRecord) else b
    if sa.get("kind") != sb.get("kind"):
        raise ValueError(f"cannot compare a {sa.get('kind')!r} record with a {sb.get('kind')!r} record")
    tol = tolerances if isinstance(tolerances, dict) else {"*": float(tolerances)}
    fa, fb = _flatten(sa), _flatten(sb)
    deltas, flagged = {}, {}
    missing = sorted(set(fa) ^ set(fb))
    for key in sorted(set(fa) & set(fb)):
        x, y = fa[key], fb[key]
        if isinstance(x, (int, float)) and isinstance(y, (int, float)) and not isinstance(x, bool):
            delta = float(y) - float(x)
            if delta != 0.0:
                deltas[key] = delta
                if abs(delta) > tol.get(key, tol.get("*", 0.0)):
                    flagged[key] = delta
        elif x != y:
            deltas[key] = (x, y)
            flagged[key] = (x, y)
    return DiffReport(sa.get("kind"), deltas, flagged, missing)


# ---------------------------------------------------------------------------
# command line


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="vpblab", description="Run a kinetic-decay experiment from a YAML config.")
    ap.add_argument("--config", type=Path, help="YAML config file (defaults apply when omitted)")
    ap.add_argument("--out", type=Path, help="output directory (overrides the config)")
    ap.add_argument("--seed", type=int, help="seed override")
    ap.add_argument("--kind", choices=KINDS, help="experiment kind override")
    ap.add_argument("--list-kinds", action="store_true", help="print the experiment kinds and exit")
    ap.add_argument("--compare", nargs=2, type=Path, metavar=("A", "B"), help="diff two summary.json files")
    ap.add_argument("--tolerance", type=float, default=0.0, help="tolerance for --compare")
    args = ap.parse_args(argv)
    if args.list_kinds:
        print("\n".join(KINDS))
        return 0
    if args.compare:
        a, b = (json.loads(p.read_text(encoding="utf-8")) for p in args.compare)
        rep = compare(a, b, args.tolerance)
        print(json.dumps(_plain({"kind": rep.kind, "deltas": rep.deltas, "flagged": rep.flagged,
                                 "missing": rep.missing, "passed": rep.passed}), indent=2, default=str))
        return 0 if rep.passed else 1
    try:
        cfg = parse_config(args.config.read_text(encoding="utf-8") if args.config else "")
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.kind:
        cfg.kind = args.kind
    if args.seed is not None:
        cfg.seed = args.seed
    try:
        record = run(cfg, args.out)
    except RunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(json.dumps({"kind": cfg.kind, "passed": record.summary["passed"], "outputs": record.outputs,
                      "wall_time": round(record.wall_time, 3)}))
    return record.exit_code


if __name__ == "__main__":
    sys.exit(main())
