"""Pose accuracy of the l1 objective against the squared-residual ablation.

Both runs share the simulated stack, common lines and voting; only the
optimizer's loss differs. Prints one row per seed.

    python3 scripts/noise_l1_vs_l2.py --snr 1.0 --n 50 --seeds 0 1 2 [--mask 0.3]
"""

import argparse
import time

from clpose.config import PipelineConfig
from clpose.commonline import oracle_common_lines, pair_agreement
from clpose.evaluation import align_global, metrics
from clpose.pipeline import run_poses, run_simulate


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--snr", type=float, default=1.0)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--mask", type=float, default=None, help="support mask radius (fraction of side)")
    args = p.parse_args()

    print("seed  cl_agree  normal_l1  normal_l2  inplane_l1  inplane_l2  seconds")
    for seed in args.seeds:
        t0 = time.perf_counter()
        cfg = PipelineConfig(seed=seed, n=args.n, side=args.side, snr=args.snr, mask_radius=args.mask)
        _, stack = run_simulate(cfg)
        rep, agree = {}, None
        for loss in ("l1", "l2"):
            res = run_poses(cfg.replace(loss=loss), stack)
            if agree is None:
                agree = pair_agreement(res.cl, oracle_common_lines(stack.true_rotations, cfg.n_theta)).mean()
            al = align_global(res.rotations, stack.true_rotations)
            rep[loss] = metrics(al.aligned, stack.true_rotations)
        print(f"{seed:4d}  {100 * agree:7.1f}%  {rep['l1'].normal_err_deg:9.3f}  {rep['l2'].normal_err_deg:9.3f}"
              f"  {rep['l1'].inplane_err_deg:10.3f}  {rep['l2'].inplane_err_deg:10.3f}"
              f"  {time.perf_counter() - t0:7.1f}")


if __name__ == "__main__":
    main()
