"""Train and evaluate the 3D drone model in the maze or tunnel scenario."""
import argparse
import json
import logging
from pathlib import Path

from decbf import certificates, trainer, world
from decbf.evaluator import evaluate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", choices=["maze3d", "tunnel3d"], default="maze3d")
    ap.add_argument("--out", default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rounds", type=int, default=60)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--agents", type=int, nargs="+", default=[8, 16, 32])
    ap.add_argument("--episodes", type=int, default=10)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out or f"runs/{args.scenario}")
    out.mkdir(parents=True, exist_ok=True)
    sc = world.load_preset(args.scenario)
    pair = certificates.init_pair(sc.dynamics, seed=args.seed, goal_error_cap=sc.goal_error_cap)
    cfg = trainer.TrainConfig(outer_iterations=args.rounds, steps_per_collection=args.steps, seed=args.seed)
    pair, _ = trainer.train(pair, sc, cfg, history_path=out / "history.csv", checkpoint_path=out / "checkpoint.json")
    for n in args.agents:
        for refine in (False, True):
            m = evaluate(pair, sc.with_agents(n), args.episodes, refine=refine, with_eps=False).mean()
            print(json.dumps({"agents": n, "refine": refine, "safety_rate": m["safety_rate"],
                              "mean_reward": m["mean_reward"], "opr_proportion": m["opr_proportion"]}), flush=True)


if __name__ == "__main__":
    main()
