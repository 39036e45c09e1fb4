"""Scenario runner.

A scenario is a single JSON file naming the mode and the ingredients:

    {
      "mode": "flow",
      "ocp": {"t_f": 1.0, "N": 64,
              "A": [[0, 1], [0, 0]], "B": [[0], [1]],
              "f": 0.0, "x0": [1.0, 0.0],
              "cost": {"alpha": 1.0,
                       "stage": {"quadratic": {"Q": [[1, 0], [0, 1]],
                                               "q": [0, 0]}}}},
      "integrator": {"scheme": "implicit_midpoint", "h_t": 0.005,
                     "T": 30.0, "newton_tol": 1e-10},
      "output": {"dir": "out", "full_state": false},
      "seed": 0
    }

Modes: solve (KKT oracle + golden CSV), flow (optimizer trajectory and
convergence report), closedloop (plant in the loop), audit (power
balance, passivity, monotonicity probes), spectrum (linearization,
Lyapunov certificate, rates).  Every run writes a manifest with
checksums; identical configs and seeds produce byte-identical files.

Exit codes: 0 success, 1 comparison mismatch, 2 configuration or format
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (lyapunov_certificate, metric_generator,
                       nonnormality, saddle_blocks, spectral_abscissa)
from .closedloop import (CouplingSpec, couple, assemble_plant, cubic_plant,
                         linear_plant, simulate_closed_loop)
from .errors import ConfigError, FormatError, NotHurwitz, ToolkitError
from .ocp import (CostSpec, LinearPlantModel, LogCoshStage, QuadraticStage,
                  assemble_ocp, build_grid, kkt_residual, kkt_solve)
from .optimizer import (IntegratorConfig, assemble_optimizer, constant_input,
                        convergence_report, default_initial_state,
                        default_outer_step, integrate_flow)
from .phcore import (accretivity_probe, power_balance_audit,
                     shifted_passivity_audit, SteadyStatePair)

_MODES = ("solve", "flow", "closedloop", "audit", "spectrum")


# ---------------------------------------------------------------------------
# configuration parsing


def _need(cfg: dict, key: str, path: str):
    if key not in cfg:
        raise ConfigError("missing required field", field=f"{path}{key}")
    return cfg[key]


def _as_matrix(value, path: str) -> np.ndarray:
    try:
        mat = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError("expected a numeric array", field=path)
    if mat.ndim == 1:
        mat = mat.reshape(-1, 1)
    return mat


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")


def build_cost(cfg: dict, path: str = "ocp.cost.") -> CostSpec:
    alpha = float(_need(cfg, "alpha", path))
    if alpha <= 0:
        raise ConfigError("must be positive", field=path + "alpha")
    stage_cfg = _need(cfg, "stage", path)
    if "quadratic" in stage_cfg:
        qc = stage_cfg["quadratic"]
        Q = np.array(_need(qc, "Q", path + "stage.quadratic."), dtype=float)
        q = np.array(qc.get("q", np.zeros(Q.shape[0])), dtype=float)
        try:
            stage = QuadraticStage(Q, q)
        except ToolkitError as exc:
            raise ConfigError(str(exc), field=path + "stage.quadratic")
    elif "logcosh" in stage_cfg:
        scale = float(stage_cfg["logcosh"].get("scale", 1.0))
        if scale <= 0:
            raise ConfigError("must be positive", field=path + "stage.logcosh.scale")
        stage = LogCoshStage(scale)
    else:
        raise ConfigError("stage must be 'quadratic' or 'logcosh'",
                          field=path + "stage")
    return CostSpec(alpha, stage)


def build_ocp(cfg: dict):
    t_f = float(_need(cfg, "t_f", "ocp."))
    N = int(_need(cfg, "N", "ocp."))
    if t_f <= 0:
        raise ConfigError("must be positive", field="ocp.t_f")
    if N < 2:
        raise ConfigError("must be at least 2", field="ocp.N")
    A = _as_matrix(_need(cfg, "A", "ocp."), "ocp.A")
    B = _as_matrix(_need(cfg, "B", "ocp."), "ocp.B")
    x0 = np.array(_need(cfg, "x0", "ocp."), dtype=float).reshape(-1)
    f = np.array(cfg.get("f", 0.0), dtype=float)
    cost = build_cost(_need(cfg, "cost", "ocp."))
    try:
        model = LinearPlantModel(A, B, f, x0)
        grid = build_grid(t_f, N)
        return assemble_ocp(model, grid, cost)
    except ToolkitError as exc:
        raise ConfigError(str(exc), field="ocp")


def build_plant(cfg: dict, ocp):
    kind = _need(cfg, "kind", "plant.")
    B_p = _as_matrix(cfg.get("B_p", ocp.model.B), "plant.B_p")
    x_p0 = np.array(_need(cfg, "x_p0", "plant."), dtype=float).reshape(-1)
    try:
        if "linear" in kind:
            lc = kind["linear"]
            R = _as_matrix(_need(lc, "R", "plant.kind.linear."), "plant.kind.linear.R")
            J = lc.get("J")
            return linear_plant(R, B_p, x_p0, J=None if J is None else _as_matrix(J, "plant.kind.linear.J"))
        if "cubic" in kind:
            cc = kind["cubic"]
            R = _as_matrix(_need(cc, "R", "plant.kind.cubic."), "plant.kind.cubic.R")
            kappa = float(cc.get("kappa", 0.0))
            return cubic_plant(R, kappa, B_p, x_p0)
    except ToolkitError as exc:
        raise ConfigError(str(exc), field="plant.kind")
    raise ConfigError("kind must be 'linear' or 'cubic'", field="plant.kind")


def build_integrator(cfg: dict, ocp) -> tuple[IntegratorConfig, float]:
    cfg = cfg or {}
    h_t = float(cfg.get("h_t", default_outer_step(ocp)))
    T = float(cfg.get("T", 10.0))
    if T <= 0:
        raise ConfigError("must be positive", field="integrator.T")
    try:
        icfg = IntegratorConfig(
            h_t=h_t,
            scheme=cfg.get("scheme", "implicit_midpoint"),
            newton_tol=float(cfg.get("newton_tol", 1e-10)),
            max_steps=int(cfg.get("max_steps", 1_000_000)),
            store_every=int(cfg.get("store_every", 1)),
        )
    except ToolkitError as exc:
        raise ConfigError(str(exc), field="integrator")
    return icfg, T


# ---------------------------------------------------------------------------
# deterministic CSV output


def fmt(x) -> str:
    """Shortest round-trip decimal; locale independent, byte stable."""
    return repr(float(x))


def write_csv(path: Path, header: list[str], rows, trailer: str = ""):
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")
        if trailer:
            fh.write(trailer + "\n")


def write_kkt_csv(path: Path, ocp, z_hat):
    """Golden-file layout: per-node tau, x, u, node-registered lambda,
    plus one trailing lambda0 record."""
    lam_nodes = ocp.node_adjoint(z_hat.lam)
    header = (["tau"]
              + [f"x_{j + 1}" for j in range(ocp.n)]
              + [f"u_{j + 1}" for j in range(ocp.m)]
              + [f"lambda_{j + 1}" for j in range(ocp.n)])
    rows = [
        [ocp.grid.nodes[i], *z_hat.x[i], *z_hat.u[i], *lam_nodes[i]]
        for i in range(ocp.N + 1)
    ]
    trailer = "lambda0," + ",".join(fmt(v) for v in z_hat.lam0)
    write_csv(path, header, rows, trailer=trailer)


def read_table_csv(path):
    """Read a CSV written by this tool: header, float rows, optional
    lambda0 trailer."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty file")
    header = lines[0].split(",")
    rows, trailer = [], None
    for ln in lines[1:]:
        if ln.startswith("lambda0,"):
            trailer = np.array([float(v) for v in ln.split(",")[1:]])
            continue
        try:
            rows.append([float(v) for v in ln.split(",")])
        except ValueError:
            raise FormatError(f"{path}: non-numeric row {ln[:40]!r}")
    data = np.array(rows, dtype=float)
    if data.ndim != 2 or data.shape[1] != len(header):
        raise FormatError(f"{path}: ragged rows")
    return header, data, trailer


def compare(golden_path, candidate_path, tol: float) -> tuple[int, str]:
    """Columnwise max-abs comparison; exit 0 on agreement, 1 otherwise."""
    h1, d1, t1 = read_table_csv(golden_path)
    h2, d2, t2 = read_table_csv(candidate_path)
    if h1 != h2:
        raise FormatError("headers differ: "
                          f"{','.join(h1)!r} vs {','.join(h2)!r}")
    if d1.shape != d2.shape:
        raise FormatError(f"row counts differ: {d1.shape} vs {d2.shape}")
    if (t1 is None) != (t2 is None):
        raise FormatError("one file has a lambda0 record, the other does not")
    diff = np.abs(d1 - d2)
    worst = float(diff.max(initial=0.0))
    msg = f"max column difference {worst:.3e} (tol {tol:.3e})"
    if t1 is not None:
        tdiff = float(np.max(np.abs(t1 - t2), initial=0.0))
        worst = max(worst, tdiff)
        msg += f", lambda0 difference {tdiff:.3e}"
    if worst <= tol:
        return 0, "MATCH: " + msg
    i, j = np.unravel_index(int(np.argmax(diff)), diff.shape)
    return 1, (f"MISMATCH: {msg}; worst offender column '{h1[j]}' "
               f"row {i} ({d1[i, j]!r} vs {d2[i, j]!r})")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(out_dir: Path, cfg: dict, files: list[Path], t0: float):
    import scipy

    manifest = {
        "config": cfg,
        "versions": {
            "phflow": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "files": {f.name: _sha256(f) for f in files},
        "wall_clock_s": round(time.time() - t0, 3),
    }
    path = out_dir / "manifest.json"
    with open(path, "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# mode runners


def run_solve(cfg, ocp, out_dir: Path, seed: int, full_state: bool):
    z_hat = kkt_solve(ocp)
    _, norm = kkt_residual(ocp, z_hat)
    kkt_path = out_dir / "kkt.csv"
    write_kkt_csv(kkt_path, ocp, z_hat)
    lam_nodes = ocp.node_adjoint(z_hat.lam)
    stat_gap = float(np.max(np.abs(
        ocp.cost.alpha * z_hat.u + lam_nodes @ ocp.model.B
    )))
    report = out_dir / "kkt_report.txt"
    report.write_text(
        "[kkt]\n"
        f"residual_norm: {norm:.6e}\n"
        f"stationarity_gap: {stat_gap:.6e}\n"
        f"cost: {ocp.cost_value(ocp.join_primal(z_hat.x, z_hat.u)):.12g}\n",
        newline="\n",
    )
    return [kkt_path, report]


def _flow_outputs(ocp, sys, traj, z_hat, out_dir: Path, full_state: bool):
    report = convergence_report(traj, z_hat, ocp)
    pb = power_balance_audit(sys, traj)
    residual_col = np.concatenate([[0.0], pb.residuals])
    rows = np.column_stack([
        traj.times, report.errors, report.errors_primal, report.errors_dual,
        residual_col,
    ])
    flow_path = out_dir / "flow.csv"
    write_csv(flow_path, ["t", "err_total", "err_primal", "err_dual",
                          "power_residual"], rows)
    files = [flow_path]
    rpt = out_dir / "convergence_report.txt"
    rpt.write_text("[convergence]\n" + report.summary() + "\n", newline="\n")
    files.append(rpt)
    if full_state:
        state_path = out_dir / "flow_state.csv"
        header = ["t"] + [f"z_{j + 1}" for j in range(traj.states.shape[1])]
        write_csv(state_path, header,
                  np.column_stack([traj.times, traj.states]))
        files.append(state_path)
    return files


def run_flow(cfg, ocp, out_dir: Path, seed: int, full_state: bool):
    icfg, T = build_integrator(cfg.get("integrator"), ocp)
    z_hat = kkt_solve(ocp)
    sys = assemble_optimizer(ocp)
    traj = integrate_flow(sys, default_initial_state(ocp), constant_input(ocp),
                          icfg, T)
    return _flow_outputs(ocp, sys, traj, z_hat, out_dir, full_state)


def run_closedloop(cfg, ocp, out_dir: Path, seed: int, full_state: bool):
    if "plant" not in cfg:
        raise ConfigError("missing required field", field="plant")
    spec = build_plant(cfg["plant"], ocp)
    plant_sys = assemble_plant(spec, rng=seed)
    cspec = CouplingSpec(cfg.get("coupling", {}).get("gamma", "inv_alpha"))
    cls = couple(assemble_optimizer(ocp), plant_sys, ocp, cspec)
    icfg, T = build_integrator(cfg.get("integrator"), ocp)
    run = simulate_closed_loop(cls, icfg, T, x_p0=spec.x_p0)
    pb = power_balance_audit(cls.sys, run.traj)
    residual_col = np.concatenate([[0.0], pb.residuals])
    header = (["t"]
              + [f"xp_{j + 1}" for j in range(cls.n_p)]
              + [f"up_{j + 1}" for j in range(ocp.m)]
              + ["norm_total", "norm_plant", "norm_optimizer", "power_residual"])
    xp = run.traj.states[:, :cls.n_p]
    rows = np.column_stack([
        run.traj.times, xp, run.feedback.u_p,
        run.norm_total, run.norm_plant, run.norm_optimizer, residual_col,
    ])
    path = out_dir / "closedloop.csv"
    write_csv(path, header, rows)
    files = [path]
    if full_state:
        state_path = out_dir / "closedloop_state.csv"
        header = ["t"] + [f"z_{j + 1}" for j in range(run.traj.states.shape[1])]
        write_csv(state_path, header,
                  np.column_stack([run.traj.times, run.traj.states]))
        files.append(state_path)
    return files


def run_audit(cfg, ocp, out_dir: Path, seed: int, full_state: bool):
    icfg, T = build_integrator(cfg.get("integrator"), ocp)
    sys = assemble_optimizer(ocp)
    z_hat = kkt_solve(ocp)
    traj = integrate_flow(sys, default_initial_state(ocp), constant_input(ocp),
                          icfg, T)
    pb = power_balance_audit(sys, traj)
    ss = SteadyStatePair(z_hat.vector, constant_input(ocp),
                         sys.output(z_hat.vector))
    sh = shifted_passivity_audit(sys, traj, ss)
    probe = accretivity_probe(sys.M, sys.metric, rng=seed, n_pairs=200)
    z0 = traj.states[0]
    z0_scale = 1.0 + sys.metric.inner(z0, z0)
    path = out_dir / "audit.txt"
    path.write_text(
        "[power_balance]\n"
        f"max_residual: {pb.max_residual:.6e}\n"
        f"scaled_tolerance: {1e-10 * z0_scale:.6e}\n"
        f"pass: {pb.max_residual <= 1e-10 * z0_scale}\n"
        "[shifted_passivity]\n"
        f"max_equality_residual: {sh.max_equality_residual:.6e}\n"
        f"max_inequality_excess: {sh.max_inequality_excess:.6e}\n"
        f"pass: {sh.passive(1e-9)}\n"
        "[monotonicity]\n"
        f"min_gap: {probe.min_gap:.6e}\n"
        f"c_estimate: {probe.c_estimate:.6e}\n"
        f"violation: {probe.violation}\n",
        newline="\n",
    )
    return [path]


def run_spectrum(cfg, ocp, out_dir: Path, seed: int, full_state: bool):
    sys = assemble_optimizer(ocp)
    z_hat = kkt_solve(ocp)
    DM = sys.M.derivative(z_hat.vector)
    abscissa = spectral_abscissa(DM)
    gen = metric_generator(DM, sys.metric)
    blocks = saddle_blocks(DM, ocp.primal_dim, ocp.primal_metric,
                           ocp.dual_metric)
    lines = [
        "[spectrum]",
        f"spectral_abscissa: {abscissa:.9g}",
        f"nonnormality: {nonnormality(gen):.6e}",
        f"sigma_min_coupling: {blocks.sigma_min_m2:.6e}",
        f"dual_block_max: {blocks.dual_block_max:.3e}",
        f"adjoint_gap: {blocks.adjoint_gap:.3e}",
        "[lyapunov]",
    ]
    try:
        cert = lyapunov_certificate(gen)
        lines += [
            f"residual: {cert.residual:.6e}",
            f"min_eig_P: {cert.min_eig_P:.6e}",
            f"valid: {cert.valid()}",
        ]
    except NotHurwitz as exc:
        lines += ["valid: False", f"reason: {exc}"]
    lines.append("[rates]")
    icfg, T = build_integrator(cfg.get("integrator"), ocp)
    traj = integrate_flow(sys, default_initial_state(ocp), constant_input(ocp),
                          icfg, T)
    report = convergence_report(traj, z_hat, ocp)
    if report.indeterminate:
        lines.append("rate: indeterminate")
    else:
        lines.append(f"rate: {report.rate:.6g}")
        lines.append(f"spectral_prediction: {-abscissa:.6g}")
    path = out_dir / "spectrum.txt"
    path.write_text("\n".join(lines) + "\n", newline="\n")
    return [path]


_RUNNERS = {
    "solve": run_solve,
    "flow": run_flow,
    "closedloop": run_closedloop,
    "audit": run_audit,
    "spectrum": run_spectrum,
}


def run(config_path, out_dir, seed=None, full_state=None, mode=None) -> int:
    """Execute one scenario; returns the process exit code."""
    t0 = time.time()
    try:
        cfg = load_config(config_path)
        cfg_mode = mode or cfg.get("mode")
        if cfg_mode not in _MODES:
            raise ConfigError(f"mode must be one of {_MODES}", field="mode")
        ocp = build_ocp(_need(cfg, "ocp", ""))
        seed = int(cfg.get("seed", 0)) if seed is None else int(seed)
        full = bool(cfg.get("output", {}).get("full_state", False)) \
            if full_state is None else bool(full_state)
        out = Path(out_dir or cfg.get("output", {}).get("dir", "out"))
        out.mkdir(parents=True, exist_ok=True)
        files = _RUNNERS[cfg_mode](cfg, ocp, out, seed, full)
        files.append(write_manifest(out, cfg, files, t0))
        print(f"{cfg_mode}: wrote {', '.join(f.name for f in files)} to {out}")
        return 0
    except (ConfigError, FormatError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except ToolkitError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="phflow",
        description="Monotone pH optimal-control toolkit scenario runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for mode in _MODES:
        p = sub.add_parser(mode, help=f"run a {mode} scenario")
        p.add_argument("--config", required=True, nargs="+",
                       help="scenario JSON file(s)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--full-state", action="store_true", default=None)
        p.add_argument("--jobs", type=int, default=1,
                       help="run multiple configs in parallel processes")
    pc = sub.add_parser("compare", help="compare two CSV files columnwise")
    pc.add_argument("golden")
    pc.add_argument("candidate")
    pc.add_argument("--tol", type=float, required=True)

    args = parser.parse_args(argv)
    if args.command == "compare":
        try:
            code, msg = compare(args.golden, args.candidate, args.tol)
        except (FormatError, OSError) as exc:
            print(f"format error: {exc}", file=sys.stderr)
            return 2
        print(msg)
        return code

    configs = args.config
    if len(configs) == 1:
        return run(configs[0], args.out, args.seed, args.full_state,
                   mode=args.command)
    # several configs: one subdirectory each, optionally in parallel
    jobs = max(1, args.jobs)
    tasks = [(c, str(Path(args.out) / Path(c).stem)) for c in configs]
    if jobs == 1:
        codes = [run(c, o, args.seed, args.full_state, mode=args.command)
                 for c, o in tasks]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(run, c, o, args.seed, args.full_state, args.command)
                for c, o in tasks
            ]
            codes = [f.result() for f in futures]
    return max(codes)


if __name__ == "__main__":
    sys.exit(main())
