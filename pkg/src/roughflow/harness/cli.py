"""Command-line entry point.

Exit codes: 0 success, 1 validation or usage error, 2 numerical failure
(explosion, singular Jacobian or other solver breakdown).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from ..foliated import leaf_check
from ..rde_solver import SingularJacobianError, SolverError, solve_rde, solve_with_jacobians
from ..rough_lift import brownian_rough_path, lift_piecewise_linear, read_path_csv, sample_brownian
from ..tensor_algebra import RoughPathError, holder_norms, max_chen_residual, max_shuffle_residual
from . import experiments as ex
from . import io
from .config import ConfigError, ExperimentConfig, load_config, schema_text

COMMANDS = ("lift", "solve", "flow", "wongzakai", "support", "ldp", "foliated-demo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="roughflow", description="Rough-path flows and leafwise RDE experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (beats $ROUGHFLOW_OUT and the config)")
        if name in ("lift", "solve"):
            p.add_argument("--path", help="driver CSV with header t,w1..wd (default: Brownian level m)")
        if name in ("ldp", "support"):
            p.add_argument("--h-file", help="Cameron-Martin path CSV with header t,w1..wd")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    over = {"seed": args.seed}
    if getattr(args, "h_file", None):
        over["h_file"] = args.h_file
    return cfg.with_overrides(**over)


def _driver(cfg: ExperimentConfig, d: int, path_csv: str | None):
    if path_csv:
        w = read_path_csv(path_csv, anchor=True)
        if w.dim != d:
            raise ConfigError(f"driver CSV has {w.dim} components, expected {d}")
        return lift_piecewise_linear(w, cfg.alpha)
    return brownian_rough_path(sample_brownian(d, cfg.T, cfg.m, cfg.seed), cfg.m, cfg.alpha)


def _manifest(cmd: str, cfg: ExperimentConfig, **extra) -> dict:
    out = {"schema_version": io.SCHEMA_VERSION, "command": cmd, "config": cfg.to_dict()}
    out.update(extra)
    return out


def cmd_lift(cfg, args, out: Path):
    path = _driver(cfg, cfg.d, args.path)
    hr = holder_norms(path)
    io.write_json(io.rough_path_dict(path), out / "rough_path.json")
    io.write_json(_manifest(
        "lift", cfg, driver_hash=io.driver_hash(path), n_cells=path.n_cells,
        holder={"norm1": hr.norm1, "norm2": hr.norm2, "alpha": hr.alpha},
        chen_residual=max_chen_residual(path) if path.n_cells <= 512 else None,
        shuffle_residual=max_shuffle_residual(path) if path.n_cells <= 512 else None,
    ), out / "manifest.json")
    print(f"lifted {path.n_cells} cells; holder norms {hr.norm1:.6g} {hr.norm2:.6g}")


def cmd_solve(cfg, args, out: Path):
    V = ex.field_family(cfg)
    path = _driver(cfg, V.d, args.path)
    xi = ex.start_point(cfg, V.p)
    scfg = ex.solve_config(cfg)
    if cfg.jacobians:
        traj = solve_with_jacobians(xi, path, V, scfg)
    else:
        traj = solve_rde(xi, path, V, scfg)
    io.write_trajectory_csv(traj, out / "trajectory.csv", with_jacobians=cfg.jacobians)
    io.write_json(_manifest(
        "solve", cfg, driver_hash=io.driver_hash(path), subdiv=traj.subdiv,
        converged=traj.converged, field=V.name, endpoint=traj.endpoint,
    ), out / "manifest.json")
    print(f"solved {traj.times.size - 1} steps (subdivision {traj.subdiv}); endpoint {np.array2string(traj.endpoint, precision=12)}")


def cmd_flow(cfg, args, out: Path):
    samples, path, space = ex.flow_experiment(cfg)
    rows = []
    for s in samples:
        for src, img in zip(s.sources, s.images):
            rows.append([s.time, *src.y, space.transversal.label(src.z), *img.y,
                         space.transversal.label(img.z), img.winding])
    p = space.p
    header = (["t"] + [f"src_y{k + 1}" for k in range(p)] + ["src_z_repr"]
              + [f"y{k + 1}" for k in range(p)] + ["z_repr", "winding"])
    io.write_csv(header, rows, out / "flow.csv")
    io.write_json(_manifest(
        "flow", cfg, driver_hash=io.driver_hash(path), space=space.describe(),
        samples=[{"t": s.time, "roundtrip_error": s.roundtrip_error, "transversal_exact": s.transversal_exact,
                  "min_source_gap": s.min_source_gap, "min_image_gap": s.min_image_gap} for s in samples],
    ), out / "manifest.json")
    print(f"flow on {len(samples[0].sources)} points; max round trip {max(s.roundtrip_error for s in samples):.3g}")


def cmd_wongzakai(cfg, args, out: Path):
    table = ex.wong_zakai_experiment(cfg)
    io.write_csv(list(ex.CSV_COLUMNS), [[getattr(r, c) for c in ex.CSV_COLUMNS] for r in table.rows],
                 out / "convergence.csv")
    body = table.to_dict()
    body["schema_version"] = io.SCHEMA_VERSION
    body["decreasing"] = table.strictly_decreasing()
    io.write_json(body, out / "convergence.json")
    io.write_json(_manifest("wongzakai", cfg), out / "manifest.json")
    for r in table.rows:
        print(f"m={r.m:2d}  d_alpha={r.d_alpha:.6e}  sol={r.sol_sup_dist:.6e}  leaf={r.foliated_sup_dist:.6e}")


def cmd_support(cfg, args, out: Path):
    rep = ex.support_skeleton_demo(cfg)
    io.write_json(rep, out / "support.json")
    io.write_json(_manifest("support", cfg), out / "manifest.json")
    print(f"skeleton vs ODE oracle sup-distance {rep['ode_sup_dist']:.3g}; "
          f"closest Brownian solve {rep['min_brownian_dist']:.3g}")


def cmd_ldp(cfg, args, out: Path):
    rep = ex.ldp_experiment(cfg)
    io.write_json(rep, out / "ldp.json")
    io.write_csv(["epsilon", "q"], list(zip(rep["epsilons"], rep["q"])), out / "ldp.csv")
    io.write_json(_manifest("ldp", cfg), out / "manifest.json")
    print(f"J = {rep['rate']:.17g}")
    for e, q in zip(rep["epsilons"], rep["q"]):
        print(f"q(eps={e:g}, delta={cfg.delta:g}) = {q:.6f}")


def cmd_foliated_demo(cfg, args, out: Path):
    traj, path, report = ex.foliated_demo(cfg)
    io.write_foliated_csv(traj, out / "foliated.csv")
    io.write_json(_manifest(
        "foliated-demo", cfg, driver_hash=io.driver_hash(path), space=traj.space.describe(),
        subdiv=traj.subdiv, leaf_ok=report.ok,
        transitions=[{"t": t, "step": s} for t, s in report.transitions],
    ), out / "manifest.json")
    print(f"leaf check {'passed' if report.ok else 'FAILED'}; {len(report.transitions)} transitions")
    if not report.ok:
        raise SolverError(f"leaf violation {report.violation}")


HANDLERS = {
    "lift": cmd_lift, "solve": cmd_solve, "flow": cmd_flow, "wongzakai": cmd_wongzakai,
    "support": cmd_support, "ldp": cmd_ldp, "foliated-demo": cmd_foliated_demo,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _config(args)
        out = cfg.output_dir(args.out)
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg, args, out)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(schema_text(), file=sys.stderr)
        return 1
    except (SingularJacobianError, SolverError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (RoughPathError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
