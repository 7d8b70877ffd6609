"""Jacobian norm along circles through three anchors, for source and target anchors.

    python3 scripts/trajectories.py --method source_only --out trajectories.csv
"""

import argparse

import numpy as np

from uda_lab.analysis import choose_anchors, trajectory_sensitivity, write_trajectories
from uda_lab.trainer import RunConfig, load_data, train


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--method", default="source_only")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--points", type=int, default=200)
    parser.add_argument("--out", default="trajectories.csv")
    args = parser.parse_args()

    cfg = RunConfig(method=args.method)
    cfg.seed.model = cfg.seed.data = cfg.seed.aug = args.seed
    pair = load_data(cfg)
    bundle, _ = train(cfg, pair)
    rng = np.random.default_rng(args.seed)

    curves = {}
    domains = {"source": (pair.x_s, pair.y_s), "target": (pair.x_t, pair.y_t_eval)}
    for domain, (x, y) in domains.items():
        for kind, same in (("same", True), ("cross", False)):
            curve = trajectory_sensitivity(bundle, choose_anchors(bundle, x, y, same, rng), args.points)
            curves[f"{domain}_{kind}"] = curve
            at_anchors = curve.norms[curve.anchor_indices].mean()
            print(f"{domain:>6} {kind:>5}-class: curve mean {curve.norms.mean():.3f}, at anchors {at_anchors:.3f}")
    write_trajectories(curves, args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
