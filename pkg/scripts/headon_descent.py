"""Train the 2-agent head-on toy over several seeds; report loss descent, eps-hat and the landscape."""
import argparse
import json
import logging
from pathlib import Path

import numpy as np

from decbf import certificates, trainer, world
from decbf.evaluator import LandscapeSpec, landscape

HEADON = dict(danger_memory=2000, probe_episodes=4, convergence_tol=None)
HEADON_ETA = 0.01


def landscape_shares(pair, sc):
    g = landscape(pair, sc, LandscapeSpec())
    d, v = np.meshgrid(g.distances, g.velocities, indexing="ij")
    near = g.values[d < sc.safe_distance]
    corner = g.values[(d >= np.quantile(g.distances, 0.75)) & (v <= np.quantile(g.velocities, 0.25))]
    return g, float(np.mean(near < 0)), float(np.mean(corner > 0))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/headon")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--rounds", type=int, default=30)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--eta", type=float, default=HEADON_ETA)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sc = world.load_preset("headon2d")
    for seed in args.seeds:
        pair = certificates.init_pair(sc.dynamics, seed=seed, eta=args.eta)
        cfg = trainer.TrainConfig(outer_iterations=args.rounds, steps_per_collection=args.steps, seed=seed, **HEADON)
        pair, hist = trainer.train(pair, sc, cfg, history_path=out / f"history_{seed}.csv",
                                   checkpoint_path=out / f"checkpoint_{seed}.json")
        last = hist.rows[-1]
        grid, near, corner = landscape_shares(pair, sc)
        grid.write_csv(out / f"landscape_{seed}.csv")
        print(json.dumps({
            "seed": seed,
            "lc_ratio": (last["Lc0"] + last["Lcd"] + last["Lch"]) / hist.initial["Lc"],
            "eps_round1": hist.rows[0]["eps_hat"], "eps_final": last["eps_hat"],
            "probe_safety": last["probe_safety_rate"], "near_negative": near, "corner_positive": corner,
        }), flush=True)


if __name__ == "__main__":
    main()
