"""Command-line entry point: ``autophoto <subcommand> [options]``.

Every subcommand derives all of its randomness from one root seed and
embeds the full run configuration and tool version in the files it writes.
Exit status is 0 on success, 1 for configuration and input-file problems and
2 for any other failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from autophoto._utilities import (
    AutophotoError,
    ConfigError,
    DemonstrationError,
    EpisodeError,
    FormatError,
    NumericalError,
    SceneError,
    SceneOverlapError,
    artifact_meta,
    derive_seed,
    rng_for,
)
from autophoto.aesthetics import (
    RobustnessConfig,
    ScorerParams,
    ScorerTrainConfig,
    eval_scorer,
    load_scorer,
    save_scorer,
    train_scorer,
)
from autophoto.baselines import ImitationConfig, generate_demonstrations, imitation_train
from autophoto.harness import (
    POLICY_NAMES,
    EpisodeRunner,
    EvalConfig,
    ablation_suite,
    check_disjoint,
    evaluate,
    make_runner,
    render_trajectory,
)
from autophoto.pomdp import CaptureEnv, EpisodeConfig, EpisodeTranscript, StepCounter
from autophoto.policy import PolicyConfig, PolicyParams, PPOConfig, load_policy, metrics_to_csv, save_policy, train
from autophoto.scene import SceneParams, SceneSpec, generate_scene, load_scene, load_scenes, save_scene

logger = logging.getLogger(__name__)


class RunConfig(BaseModel):
    """Everything a run depends on; echoed into every artifact."""

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=0, description="Root seed of the subcommand.")
    jobs: int = Field(default=1, ge=1, description="Worker threads for evaluation.")
    scene: SceneParams = Field(default_factory=SceneParams)
    robustness: RobustnessConfig = Field(default_factory=RobustnessConfig)
    scorer_train: ScorerTrainConfig = Field(default_factory=ScorerTrainConfig)
    episode: EpisodeConfig = Field(default_factory=EpisodeConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    ppo: PPOConfig = Field(default_factory=PPOConfig)
    imitation: ImitationConfig = Field(default_factory=ImitationConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    paths: Dict[str, str] = Field(default_factory=dict, description="Input and output paths of the run.")

    def echo(self) -> Dict[str, Any]:
        return json.loads(self.model_dump_json(by_alias=True))


def load_run_config(path: Optional[str]) -> RunConfig:
    """Read a YAML or JSON config; omitted keys take module defaults."""
    if path is None:
        return RunConfig()
    file = Path(path)
    if not file.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = yaml.safe_load(file.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML/JSON: {e}") from e
    if not isinstance(payload, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return RunConfig.model_validate(payload)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------
def _scenes(directory: str) -> List[SceneSpec]:
    if not Path(directory).is_dir():
        raise ConfigError(f"scene directory not found: {directory}")
    scenes = load_scenes(directory)
    if not scenes:
        raise ConfigError(f"no scene files in {directory}")
    return scenes


def _scene(path: str) -> SceneSpec:
    if not Path(path).is_file():
        raise ConfigError(f"scene file not found: {path}")
    return load_scene(path)


def _require_file(path: str, what: str) -> str:
    if not Path(path).is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _output(path: str) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _write_stdout(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _runners(args: argparse.Namespace, run: RunConfig, scorer: ScorerParams) -> Dict[str, EpisodeRunner]:
    runners: Dict[str, EpisodeRunner] = {}
    for name in args.policy:
        policy: Optional[PolicyParams] = None
        if name == "rl":
            policy = load_policy(_require_file(args.agent or "", "agent checkpoint (--agent)"))
        elif name == "imitation":
            policy = load_policy(_require_file(args.imitation or "", "imitation checkpoint (--imitation)"))
        runners[name] = make_runner(name, scorer, policy, run.eval.budget)
    return runners


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------
def cmd_gen_scenes(args: argparse.Namespace, run: RunConfig) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = run.scene if args.style is None else run.scene.model_copy(update={"style": args.style})
    meta = artifact_meta(run.echo())
    for i in range(args.count):
        scene_seed = derive_seed(run.seed, "scene", i)
        scene = generate_scene(scene_seed, params, scene_id=scene_seed)
        save_scene(out / f"scene_{i:03d}.json", scene, meta)
    logger.info("wrote %d %s scenes to %s", args.count, params.style, out)


def cmd_train_scorer(args: argparse.Namespace, run: RunConfig) -> None:
    scenes = _scenes(args.scenes)
    cfg = run.scorer_train
    if args.batch_size is not None:
        cfg = cfg.model_copy(update={"batch_size": args.batch_size})
    scorer, log = train_scorer(scenes, args.iters, None, run.seed, run.robustness, cfg)
    out = _output(args.out)
    save_scorer(out, scorer, artifact_meta(run.echo()))
    log_path = _output(args.log or f"{args.out}.log.csv")
    log_path.write_text(metrics_to_csv(log, run.echo()), encoding="utf-8")


def cmd_eval_scorer(args: argparse.Namespace, run: RunConfig) -> None:
    scenes = _scenes(args.scenes)
    if args.train_scenes:
        check_disjoint({s.scene_id for s in _scenes(args.train_scenes)}, scenes)
    scorer = load_scorer(_require_file(args.scorer, "scorer checkpoint"))
    report = eval_scorer(scorer, scenes, run.seed, run.robustness, scene_set=Path(args.scenes).name)
    text = report.to_csv(run.echo())
    if args.out:
        _output(args.out).write_text(text, encoding="utf-8")
    else:
        _write_stdout(text)


def cmd_train_agent(args: argparse.Namespace, run: RunConfig) -> None:
    scenes = _scenes(args.scenes)
    scorer = load_scorer(_require_file(args.scorer, "scorer checkpoint"))
    ppo = run.ppo if args.steps is None else run.ppo.model_copy(update={"total_steps": args.steps})
    agent, metrics = train(scenes, scorer, ppo, run.episode, run.seed, run.policy)
    extra = {**artifact_meta(run.echo()), "ppo_config": json.loads(ppo.model_dump_json())}
    save_policy(_output(args.out), agent, extra)
    metrics_path = _output(args.metrics or f"{args.out}.metrics.csv")
    metrics_path.write_text(metrics_to_csv(metrics, run.echo()), encoding="utf-8")


def cmd_train_imitation(args: argparse.Namespace, run: RunConfig) -> None:
    scenes = _scenes(args.scenes)
    scorer = load_scorer(_require_file(args.scorer, "scorer checkpoint"))
    cfg = run.imitation if args.count is None else run.imitation.model_copy(update={"count": args.count})
    demos = generate_demonstrations(
        scenes, scorer, cfg.count, run.seed, run.episode, cfg.attempts_per_demo
    )
    policy, report = imitation_train(
        demos, scorer, cfg, run.seed, run.policy, n_actions=len(run.episode.action_set)
    )
    extra = {**artifact_meta(run.echo()), "imitation_report": report.model_dump()}
    save_policy(_output(args.out), policy, extra)


def cmd_eval(args: argparse.Namespace, run: RunConfig) -> None:
    scenes = _scenes(args.scenes)
    train_ids = {s.scene_id for s in _scenes(args.train_scenes)} if args.train_scenes else None
    scorer = load_scorer(_require_file(args.scorer, "scorer checkpoint"))
    eval_cfg = run.eval.model_copy(
        update={k: v for k, v in {"episodes_per_scene": args.episodes, "jobs": run.jobs}.items() if v}
    )
    report = evaluate(
        _runners(args, run, scorer),
        scenes,
        scorer,
        run.seed,
        eval_cfg,
        run.episode,
        train_ids,
        scene_set=Path(args.scenes).name,
    )
    text = report.to_csv(run.echo())
    if args.out:
        _output(args.out).write_text(text, encoding="utf-8")
    else:
        _write_stdout(text)
    sys.stderr.write(report.summary() + "\n")


def cmd_ablate(args: argparse.Namespace, run: RunConfig) -> None:
    train_scenes = _scenes(args.scenes)
    eval_scenes = _scenes(args.eval_scenes)
    scorer = load_scorer(_require_file(args.scorer, "scorer checkpoint"))
    ppo = run.ppo if args.steps is None else run.ppo.model_copy(update={"total_steps": args.steps})
    eval_cfg = run.eval.model_copy(
        update={k: v for k, v in {"episodes_per_scene": args.episodes, "jobs": run.jobs}.items() if v}
    )
    table = ablation_suite(
        train_scenes, eval_scenes, scorer, run.seed, ppo, run.episode, run.policy, eval_cfg, args.variant
    )
    text = metrics_to_csv(table, run.echo())
    if args.out:
        _output(args.out).write_text(text, encoding="utf-8")
    else:
        _write_stdout(text)


def cmd_render(args: argparse.Namespace, run: RunConfig) -> None:
    scene = _scene(args.scene)
    text = Path(_require_file(args.transcript, "transcript")).read_text(encoding="utf-8")
    transcript = EpisodeTranscript.from_ndjson(text)
    scorer = load_scorer(_require_file(args.scorer, "scorer checkpoint")) if args.scorer else None
    svg, vertices = render_trajectory(scene, transcript, scorer)
    _output(args.out).write_text(svg, encoding="utf-8")
    logger.info("rendered %d path vertices to %s", len(vertices), args.out)


def cmd_demo(args: argparse.Namespace, run: RunConfig) -> None:
    scene = _scene(args.scene)
    scorer = load_scorer(_require_file(args.scorer, "scorer checkpoint"))
    args.policy = [args.policy]
    runner = _runners(args, run, scorer)[args.policy[0]]
    env = CaptureEnv(
        scene,
        scorer,
        run.episode,
        counter=StepCounter(run.eval.zeta, frozen=True),
        samples_seed=derive_seed(run.seed, "threshold"),
        evaluation=True,
        policy_name=args.policy[0],
    )
    episode_seed = derive_seed(run.seed, "episode", scene.scene_id, 0)
    env.reset(seed=episode_seed)
    transcript = runner(env, episode_seed)
    text = transcript.to_ndjson(artifact_meta(run.echo()))
    if args.out:
        _output(args.out).write_text(text, encoding="utf-8")
    _write_stdout(text)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON RunConfig file.")
    common.add_argument("--seed", type=int, help="Root seed (overrides the config).")
    common.add_argument("--jobs", type=int, help="Worker threads (overrides the config).")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings only.")

    parser = argparse.ArgumentParser(prog="autophoto", description="Autonomous aesthetic capture lab.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", parents=[common], help="Generate procedural scenes.")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True, help="Output directory.")
    p.add_argument("--style", choices=["rooms", "open"])
    p.set_defaults(handler=cmd_gen_scenes)

    p = sub.add_parser("train-scorer", parents=[common], help="Train the aesthetic scorer.")
    p.add_argument("--scenes", required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", required=True, help="Scorer checkpoint path.")
    p.add_argument("--log", help="Training log CSV (default: <out>.log.csv).")
    p.set_defaults(handler=cmd_train_scorer)

    p = sub.add_parser("eval-scorer", parents=[common], help="Scorer accuracy on held-out scenes.")
    p.add_argument("--scorer", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--train-scenes", help="Training scenes, checked for overlap.")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_eval_scorer)

    p = sub.add_parser("train-agent", parents=[common], help="Train the PPO agent.")
    p.add_argument("--scenes", required=True)
    p.add_argument("--scorer", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True, help="Policy checkpoint path.")
    p.add_argument("--metrics", help="Metrics CSV (default: <out>.metrics.csv).")
    p.set_defaults(handler=cmd_train_agent)

    p = sub.add_parser("train-imitation", parents=[common], help="Clone hill-climbing demonstrations.")
    p.add_argument("--scenes", required=True)
    p.add_argument("--scorer", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train_imitation)

    p = sub.add_parser("eval", parents=[common], help="Paired evaluation of policies.")
    p.add_argument("--scenes", required=True)
    p.add_argument("--scorer", required=True)
    p.add_argument("--policy", nargs="+", choices=POLICY_NAMES, required=True)
    p.add_argument("--episodes", type=int, help="Episodes per scene.")
    p.add_argument("--agent", help="Policy checkpoint for --policy rl.")
    p.add_argument("--imitation", help="Policy checkpoint for --policy imitation.")
    p.add_argument("--train-scenes", help="Training scenes, checked for overlap.")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="Train and evaluate the ablation variants.")
    p.add_argument("--scenes", required=True, help="Training scenes.")
    p.add_argument("--eval-scenes", required=True)
    p.add_argument("--scorer", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--variant", nargs="+", help="Subset of variants (default: all).")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("render", parents=[common], help="Top-down SVG of a transcript.")
    p.add_argument("--scene", required=True)
    p.add_argument("--transcript", required=True)
    p.add_argument("--scorer")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_render)

    p = sub.add_parser("demo", parents=[common], help="Run one episode and print its transcript.")
    p.add_argument("--scene", required=True)
    p.add_argument("--scorer", required=True)
    p.add_argument("--policy", choices=POLICY_NAMES, default="random")
    p.add_argument("--agent")
    p.add_argument("--imitation")
    p.add_argument("--out", help="Also write the transcript here.")
    p.set_defaults(handler=cmd_demo)
    return parser


_ERROR_PREFIXES: Dict[type, str] = {
    SceneOverlapError: "scene overlap",
    ConfigError: "config error",
    FormatError: "format error",
    SceneError: "scene error",
    NumericalError: "numerical error",
    EpisodeError: "episode error",
    DemonstrationError: "demonstration error",
}


def _error_prefix(error: BaseException) -> str:
    for cls, prefix in _ERROR_PREFIXES.items():
        if isinstance(error, cls):
            return prefix
    return "error"


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(stream=sys.stderr, level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")

    handler: Callable[[argparse.Namespace, RunConfig], None] = args.handler
    try:
        run = load_run_config(args.config)
        overrides: Dict[str, Any] = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.jobs is not None:
            overrides["jobs"] = args.jobs
        paths = {
            key: str(value)
            for key, value in vars(args).items()
            if key in {"scenes", "scene", "scorer", "out", "train_scenes", "eval_scenes", "agent", "imitation",
                       "transcript", "log", "metrics"}
            and value
        }
        run = RunConfig.model_validate({**run.model_dump(by_alias=True), **overrides, "paths": paths})
        handler(args, run)
    except ValidationError as e:
        sys.stderr.write(f"invalid configuration: {e}\n")
        return 1
    except (ConfigError, FormatError) as e:
        sys.stderr.write(f"{_error_prefix(e)}: {e}\n")
        return 1
    except AutophotoError as e:
        sys.stderr.write(f"{_error_prefix(e)}: {e}\n")
        return 2
    except Exception as e:  # noqa: BLE001
        logger.exception("unexpected failure")
        sys.stderr.write(f"error: {e}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
