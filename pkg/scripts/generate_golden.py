#!/usr/bin/env python3
"""Regenerate the golden KKT solution for the double-integrator scenario.

Run from the repository root:

    python scripts/generate_golden.py

The file is only expected to change when the discretization or the CSV
format changes; regenerating it is a deliberate act, reviewed like any
other golden update.
"""

from pathlib import Path

import numpy as np

import phflow as pf
from phflow.cli import write_kkt_csv


def main():
    model = pf.LinearPlantModel(
        np.array([[0.0, 1.0], [0.0, 0.0]]),
        np.array([[0.0], [1.0]]),
        0.0,
        np.array([1.0, 0.0]),
    )
    ocp = pf.assemble_ocp(model, pf.build_grid(1.0, 64),
                          pf.CostSpec(1.0, pf.QuadraticStage(np.eye(2))))
    z_hat = pf.kkt_solve(ocp)
    _, norm = pf.kkt_residual(ocp, z_hat)
    assert norm <= 1e-10, f"refusing to freeze a sloppy solution ({norm:.3e})"
    out = Path(__file__).resolve().parents[1] / "tests" / "golden"
    out.mkdir(parents=True, exist_ok=True)
    path = out / "kkt_double_integrator_N64.csv"
    write_kkt_csv(path, ocp, z_hat)
    print(f"wrote {path} (residual {norm:.3e})")


if __name__ == "__main__":
    main()
