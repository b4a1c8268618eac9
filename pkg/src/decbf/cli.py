"""Command-line entry point: ``decbf train | eval | landscape``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .certificates import CertificatePair, init_pair
from .errors import (
    CheckpointError,
    ConfigError,
    NumericError,
    PlacementError,
    TrainingDiverged,
)
from .evaluator import LandscapeSpec, evaluate, landscape, write_trajectories
from .micrograd import FORMAT_VERSION
from .trainer import TrainConfig, train
from .world import ScenarioConfig

log = logging.getLogger("decbf")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PLACEMENT = 0, 2, 3, 4


@dataclass
class RunManifest:
    command: str
    scenario: str
    output_dir: str
    checkpoint: str | None = None
    train_config: str | None = None
    seeds: list = field(default_factory=list)
    refine: bool = False
    agents: int | None = None
    overrides: dict = field(default_factory=dict)
    eta: float | None = None

    def validate(self):
        if not Path(self.scenario).exists() and self.scenario not in _presets():
            raise ConfigError(f"scenario file not found: {self.scenario}")
        for label, p in (("checkpoint", self.checkpoint), ("train config", self.train_config)):
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{label} file not found: {p}")
        out = Path(self.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise ConfigError(f"output directory not writable: {out}")

    def echo(self):
        Path(self.output_dir, "manifest.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True))


def _presets():
    from .world import PRESETS

    return PRESETS


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_run_info(out, checkpoint):
    info = {"format_version": FORMAT_VERSION, "package_version": __version__,
            "checkpoint_sha256": sha256_file(checkpoint) if checkpoint else None}
    Path(out, "run_info.json").write_text(json.dumps(info, indent=2, sort_keys=True))


def _scenario(m: RunManifest) -> ScenarioConfig:
    sc = ScenarioConfig.load(m.scenario)
    return sc.with_agents(m.agents) if m.agents else sc


def cmd_train(m: RunManifest) -> int:
    m.validate()
    sc = _scenario(m)
    cfg = TrainConfig.load(m.train_config) if m.train_config else TrainConfig()
    over = dict(m.overrides)
    if m.seeds:
        over["seed"] = m.seeds[0]
    cfg = TrainConfig.from_dict({**asdict(cfg), **over})
    m.echo()
    out = Path(m.output_dir)
    hyper = {} if m.eta is None else {"eta": m.eta}
    try:
        pair = init_pair(sc.dynamics, seed=cfg.seed, goal_error_cap=sc.goal_error_cap, **hyper)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ckpt = out / "checkpoint.json"
    _, history = train(pair, sc, cfg, history_path=out / "history.csv", checkpoint_path=ckpt,
                       dump_dir=out / "diagnostics")
    log.info("training %s; checkpoint %s", history.stopped, ckpt)
    _write_run_info(out, ckpt)
    return EXIT_OK


def cmd_eval(m: RunManifest, episodes=10, jobs=None, trajectories=True) -> int:
    if m.checkpoint is None:
        raise ConfigError("eval needs --checkpoint")
    m.validate()
    sc = _scenario(m)
    pair = CertificatePair.load(m.checkpoint)
    if pair.kind != sc.dynamics:
        raise ConfigError("checkpoint dynamics do not match the scenario")
    seeds = m.seeds or list(range(episodes))
    m.echo()
    out = Path(m.output_dir)
    t0 = time.perf_counter()
    res = evaluate(pair, sc, len(seeds), m.refine, seeds=seeds, jobs=jobs or os.cpu_count() or 1,
                   keep_rollouts=trajectories)
    res.write_json(out / "metrics.json", format_version=FORMAT_VERSION, scenario=sc.name,
                   n_agents=sc.n_agents, checkpoint_sha256=sha256_file(m.checkpoint))
    if trajectories:
        write_trajectories(out / "trajectories.csv", res.rollouts, seeds)
    Path(out, "timing.json").write_text(json.dumps(
        {"total_seconds": time.perf_counter() - t0, "episode_wall_time": res.per_episode()["wall_time"]},
        indent=2))
    _write_run_info(out, m.checkpoint)
    mean = res.mean()
    print(f"safety_rate={mean['safety_rate']:.4f} reward={mean['mean_reward']:.3f} "
          f"goal={mean['goal_reached_fraction']:.3f} opr={mean['opr_proportion']:.4f} eps_hat={mean['eps_hat']:.3f}")
    return EXIT_OK


def cmd_landscape(m: RunManifest, spec: LandscapeSpec) -> int:
    if m.checkpoint is None:
        raise ConfigError("landscape needs --checkpoint")
    m.validate()
    sc = _scenario(m)
    pair = CertificatePair.load(m.checkpoint)
    m.echo()
    grid = landscape(pair, sc, spec)
    grid.write_csv(Path(m.output_dir) / "landscape.csv")
    _write_run_info(m.output_dir, m.checkpoint)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decbf", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--scenario", required=True, help="scenario JSON file or preset name")
        sp.add_argument("--agents", type=int, help="agent count (arena scales with density scaling)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="jointly train CBF and policy")
    common(t)
    t.add_argument("--train-config", help="training config JSON")
    t.add_argument("--rounds", type=int, help="override outer_iterations")
    t.add_argument("--steps", type=int, help="override steps_per_collection")
    t.add_argument("--eta", type=float, help="goal-loss weight (default 0.1)")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--refine", choices=("on", "off"), default="on")
    e.add_argument("--jobs", type=int, default=None, help="parallel episode workers (default: all cores)")
    e.add_argument("--no-trajectories", action="store_true")

    ls = sub.add_parser("landscape", help="export a CBF landscape slice")
    common(ls)
    ls.add_argument("--checkpoint", required=True)
    ls.add_argument("--distance", type=float, nargs=3, default=(0.0, 1.0, 41), metavar=("LO", "HI", "N"))
    ls.add_argument("--velocity", type=float, nargs=3, default=(-2.0, 2.0, 41), metavar=("LO", "HI", "N"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2) + (10 if args.verbose == 0 else 0),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verbose:
        logging.getLogger("decbf").setLevel(logging.INFO if args.verbose == 1 else logging.DEBUG)
    try:
        if args.command == "train":
            over = {}
            if args.rounds is not None:
                over["outer_iterations"] = args.rounds
            if args.steps is not None:
                over["steps_per_collection"] = args.steps
            m = RunManifest("train", args.scenario, args.out, train_config=args.train_config,
                            seeds=[] if args.seed is None else [args.seed], agents=args.agents,
                            overrides=over, eta=args.eta)
            return cmd_train(m)
        if args.command == "eval":
            seeds = [] if args.seed is None else list(range(args.seed, args.seed + args.episodes))
            m = RunManifest("eval", args.scenario, args.out, checkpoint=args.checkpoint, seeds=seeds,
                            refine=args.refine == "on", agents=args.agents)
            return cmd_eval(m, args.episodes, args.jobs, not args.no_trajectories)
        m = RunManifest("landscape", args.scenario, args.out, checkpoint=args.checkpoint, agents=args.agents,
                        overrides={"distance": list(args.distance), "velocity": list(args.velocity)})
        spec = LandscapeSpec(tuple(args.distance), tuple(args.velocity))
        return cmd_landscape(m, spec)
    except PlacementError as exc:
        print(f"decbf: placement failure: {exc}", file=sys.stderr)
        return EXIT_PLACEMENT
    except (ConfigError, CheckpointError) as exc:
        print(f"decbf: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, TrainingDiverged) as exc:
        print(f"decbf: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
