"""Change-region error against the number of frames per bite, ground-truth depths.

    python scripts/sequence_length_study.py [--lengths 10 20 40 80] [--variant depth_ablation]
"""
import argparse
from dataclasses import replace

import numpy as np

from anatomy_update.dataset import build_dataset
from anatomy_update.evaluation import EvalProtocol, change_bbox, correspondence_error
from anatomy_update.pipeline import VARIANT_MODES, UpdateConfig, build_preop, run_variant
from anatomy_update.tsdf import extract_mesh


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lengths", type=int, nargs="+", default=[10, 20, 40, 80])
    ap.add_argument("--variant", choices=list(VARIANT_MODES), default="depth_ablation")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds = build_dataset(max(args.lengths), seed=args.seed)
    cfg = UpdateConfig(seed=args.seed)
    V0 = build_preop(ds.preop_frames, ds.K, cfg)
    protocol = EvalProtocol(tuple(ds.eval_poses), change_bbox(ds.gt_mesh(len(ds.bites)), ds.gt_mesh(0)))
    bites = [{"estimated": b.frames(False), "rendered-ground-truth": b.frames(True)} for b in ds.bites]
    print("frames," + ",".join(f"bite_{k}" for k in range(1, len(bites) + 1)) + ",mean")
    for n in args.lengths:
        run = run_variant(V0, bites, ds.K, replace(cfg, sequence_length=n), args.variant)
        errs = [correspondence_error(extract_mesh(V), ds.gt_mesh(k), protocol, ds.K).mean
                for k, V in enumerate(run.volumes, start=1)]
        print(f"{n}," + ",".join(f"{e:.4f}" for e in errs) + f",{np.mean(errs):.4f}", flush=True)


if __name__ == "__main__":
    main()
