"""Evaluate one checkpoint at growing agent counts with density scaling."""
import argparse
import json

from decbf import certificates, world
from decbf.evaluator import evaluate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("checkpoint")
    ap.add_argument("--scenario", default="navigation2d")
    ap.add_argument("--agents", type=int, nargs="+", default=[8, 16, 32, 64])
    ap.add_argument("--large", action="store_true", help="also run 256 agents (slow)")
    ap.add_argument("--episodes", type=int, default=10)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    sc = world.ScenarioConfig.load(args.scenario)
    pair = certificates.CertificatePair.load(args.checkpoint)
    counts = args.agents + ([256] if args.large else [])
    rows = []
    for n in counts:
        episodes = args.episodes if n <= 64 else 1
        m = evaluate(pair, sc.with_agents(n), episodes, refine=True, jobs=args.jobs, with_eps=False).mean()
        rows.append({"agents": n, "episodes": episodes, "safety_rate": m["safety_rate"],
                     "mean_reward": m["mean_reward"], "opr_proportion": m["opr_proportion"]})
        print(json.dumps(rows[-1]), flush=True)


if __name__ == "__main__":
    main()
