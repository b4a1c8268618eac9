"""Train the 2D navigation checkpoint (8 agents) and report safety and reward at 4 agents."""
import argparse
import json
import logging
from pathlib import Path

from decbf import certificates, trainer, world
from decbf.evaluator import evaluate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/navigation")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rounds", type=int, default=60)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--episodes", type=int, default=10)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sc = world.load_preset("navigation2d")
    pair = certificates.init_pair(sc.dynamics, seed=args.seed, goal_error_cap=sc.goal_error_cap)
    cfg = trainer.TrainConfig(outer_iterations=args.rounds, steps_per_collection=args.steps,
                              seed=args.seed, convergence_tol=None)
    pair, hist = trainer.train(pair, sc, cfg, history_path=out / "history.csv",
                               checkpoint_path=out / "checkpoint.json")
    res = evaluate(pair, sc.with_agents(4), args.episodes, refine=True)
    summary = {"stopped": hist.stopped, "eval_agents": 4, **res.mean()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
