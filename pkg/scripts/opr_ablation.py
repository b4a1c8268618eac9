"""Safety with and without online refinement on identical seeds."""
import argparse
import json

from decbf import certificates, world
from decbf.evaluator import evaluate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("checkpoint")
    ap.add_argument("--scenario", default="navigation2d")
    ap.add_argument("--agents", type=int, nargs="+", default=[4, 8, 16, 32, 64])
    ap.add_argument("--episodes", type=int, default=10)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    sc = world.ScenarioConfig.load(args.scenario)
    pair = certificates.CertificatePair.load(args.checkpoint)
    for n in args.agents:
        cfg = sc.with_agents(n)
        off = evaluate(pair, cfg, args.episodes, refine=False, jobs=args.jobs, with_eps=False).mean()
        on = evaluate(pair, cfg, args.episodes, refine=True, jobs=args.jobs, with_eps=False).mean()
        print(json.dumps({"agents": n, "safety_without": off["safety_rate"], "safety_with": on["safety_rate"],
                          "opr_proportion": on["opr_proportion"]}), flush=True)


if __name__ == "__main__":
    main()
