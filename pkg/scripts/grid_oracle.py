"""Grid-posterior oracle for the headline posture-sweep scenario.

Runs the exact Bayes filter on two 2-joint reductions (pitch joints, then
yaw + gripper joints, the other pair clamped to truth) over the same
simulated observations the acceptance test uses, and prints the per-joint
RMSE over the final 25 steps of every hold.  The acceptance threshold is
1.5x these numbers; re-run this script if the scenario changes.

    python scripts/grid_oracle.py [--seed 0] [--grid 256] [--save oracle.npz]
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from oracles import grid_filter  # noqa: E402

from effjoint.dirstats import circular_rmse  # noqa: E402
from effjoint.scenarios import HEADLINE_LAMBDA, HEADLINE_SIGMA, headline_filter_config, headline_scenario  # noqa: E402
from effjoint.simulator import simulate  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--grid", type=int, default=256)
    ap.add_argument("--save")
    args = ap.parse_args()

    model, bent, suite = headline_scenario()
    cfg = headline_filter_config()
    run = simulate(model, bent, suite, args.seed)
    lam = {f: HEADLINE_LAMBDA for f in cfg.orientation_frames}
    cov = {f: np.eye(3) * HEADLINE_SIGMA for f in cfg.position_frames}
    t0 = time.time()
    est = np.zeros_like(run.theta_eff)
    for pair in ((1, 2), (0, 3)):
        est[:, list(pair)] = grid_filter(
            model.to_dict(), run.observations, run.theta_eff, pair,
            cfg.kappa_0, cfg.kappa_v, cfg.kappa_w, cov, lam, args.grid,
        )
    rmse = circular_rmse(est[run.tail], run.theta_eff[run.tail])
    print(f"grid oracle ({args.grid}^2, {time.time() - t0:.0f} s) tail RMSE:", np.array2string(rmse, precision=6))
    if args.save:
        np.savez(args.save, estimate=est, rmse=rmse)


if __name__ == "__main__":
    main()
