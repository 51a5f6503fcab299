"""Paired evaluation of capture policies, ablations and trajectory images.

Every policy sees identical (scene, start pose, threshold) triples: each
episode's start is derived from the evaluation seed, the scene id and the
episode index alone, and thresholds come from one shared sample set per
scene. Accuracy is the fraction of episodes whose captured score is strictly
above tau, reported with its binomial standard error.
"""

import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Set, Tuple

import matplotlib
import numpy as np
import pandas as pd
from matplotlib.figure import Figure
from pydantic import BaseModel, ConfigDict, Field

from autophoto._utilities import (
    ConfigError,
    EpisodeError,
    SceneOverlapError,
    csv_preamble,
    derive_seed,
    rng_for,
)
from autophoto.aesthetics import Scorer, ScorerParams, score_views
from autophoto.baselines import (
    BaselineBudget,
    greedy_policy,
    imitation_policy,
    keyframe_policy,
    random_policy,
    rule_of_thirds_policy,
)
from autophoto.pomdp import (
    NO_FINE_COARSE_TURNS,
    Action,
    CaptureEnv,
    EpisodeConfig,
    EpisodeTranscript,
    ScoredSamples,
    StepCounter,
)
from autophoto.policy import PolicyConfig, PolicyParams, PPOConfig, run_policy_episode, train
from autophoto.scene import SceneSpec, render_views, true_aesthetic_batch

logger = logging.getLogger(__name__)

POLICY_NAMES: Tuple[str, ...] = ("random", "thirds", "greedy", "keyframe", "imitation", "rl")
REPORT_COLUMNS = ["policy", "scenes", "episodes", "accuracy", "stderr", "mean_len", "mean_phi"]

EpisodeRunner = Callable[[CaptureEnv, int], EpisodeTranscript]
"""Plays out a reset environment; the int is the episode seed."""


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    episodes_per_scene: int = Field(default=50, ge=1)
    jobs: int = Field(default=1, ge=1, description="Episode worker threads; reports do not depend on it.")
    zeta: int = Field(
        default=0,
        ge=0,
        description="""Frozen global step counter during evaluation.

        Only the exploration term of the recorded step rewards depends on it;
        captures, thresholds and accuracies do not. The default 0 gives the
        full exploration bonus rather than the decayed value reached at the
        end of training.
        """,
    )
    budget: BaselineBudget = Field(default_factory=BaselineBudget)


def make_runner(
    name: str,
    scorer: Optional[ScorerParams] = None,
    policy: Optional[PolicyParams] = None,
    budget: Optional[BaselineBudget] = None,
) -> EpisodeRunner:
    """Episode runner for a policy name; learned policies need their params."""
    if name == "random":
        return lambda env, seed: random_policy(env, rng_for(seed, "random"))
    if name == "thirds":
        return lambda env, seed: rule_of_thirds_policy(env)
    if name == "greedy":
        return lambda env, seed: greedy_policy(env, budget)
    if name == "keyframe":
        return lambda env, seed: keyframe_policy(env, budget, rng_for(seed, "keyframe"))
    if name in ("imitation", "rl"):
        if policy is None or scorer is None:
            raise ValueError(f"policy {name!r} needs a checkpoint and a scorer")
        learned, features_from = policy, scorer
        if name == "imitation":
            return lambda env, seed: imitation_policy(env, learned, features_from)
        return lambda env, seed: run_policy_episode(env, learned, features_from, mode="greedy")
    raise ValueError(f"unknown policy {name!r}; expected one of {', '.join(POLICY_NAMES)}")


class EpisodeResult(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    policy: str
    scene_id: int
    episode: int
    start_x: float
    start_y: float
    start_theta: float
    tau: float
    final_phi: float
    success: bool
    length: int


class PolicyResult(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    policy: str
    scenes: int
    episodes: int
    accuracy: float
    stderr: float
    mean_len: float
    mean_phi: float


def binomial_stderr(p: float, n: int) -> float:
    return math.sqrt(p * (1.0 - p) / n) if n > 0 else 0.0


def summarize(policy: str, results: Sequence[EpisodeResult]) -> PolicyResult:
    n = len(results)
    successes = sum(r.success for r in results)
    accuracy = successes / n if n else 0.0
    return PolicyResult(
        policy=policy,
        scenes=len({r.scene_id for r in results}),
        episodes=n,
        accuracy=accuracy,
        stderr=binomial_stderr(accuracy, n),
        mean_len=math.fsum(r.length for r in results) / n if n else 0.0,
        mean_phi=math.fsum(r.final_phi for r in results) / n if n else 0.0,
    )


class EvalReport(BaseModel):
    """Per-policy accuracy on a paired episode set, plus the raw episodes."""

    model_config = ConfigDict(extra="forbid")

    scene_set: str
    scene_ids: List[int]
    styles: List[str]
    seed: int
    episodes_per_scene: int
    results: List[PolicyResult]
    episodes: List[EpisodeResult] = Field(default_factory=list, repr=False)

    def result(self, policy: str) -> PolicyResult:
        for r in self.results:
            if r.policy == policy:
                return r
        raise KeyError(policy)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump() for r in self.results], columns=REPORT_COLUMNS)

    def to_csv(self, run_config: Optional[Dict[str, Any]] = None) -> str:
        meta = {
            "scene_set": self.scene_set,
            "scene_ids": self.scene_ids,
            "styles": sorted(set(self.styles)),
            "seed": self.seed,
            "episodes_per_scene": self.episodes_per_scene,
        }
        return csv_preamble(run_config, eval=meta) + self.to_frame().to_csv(index=False, float_format="%.6f")

    def summary(self) -> str:
        lines = [
            f"{self.scene_set}: {len(self.scene_ids)} scenes x {self.episodes_per_scene} episodes, seed {self.seed}"
        ]
        for r in self.results:
            lines.append(
                f"  {r.policy:<10} {100 * r.accuracy:5.1f} +/- {100 * r.stderr:4.1f}%"
                f"  len {r.mean_len:5.1f}  phi {r.mean_phi:+.3f}"
            )
        return "\n".join(lines)


def check_disjoint(train_ids: Optional[Set[int]], eval_scenes: Sequence[SceneSpec]) -> None:
    if not train_ids:
        return
    overlap = sorted(train_ids & {s.scene_id for s in eval_scenes})
    if overlap:
        raise SceneOverlapError(f"evaluation scenes overlap the training scenes: ids {overlap}")


def evaluate(
    policies: Mapping[str, EpisodeRunner],
    scenes: Sequence[SceneSpec],
    scorer: Scorer,
    seed: int = 0,
    config: Optional[EvalConfig] = None,
    episode: Optional[EpisodeConfig] = None,
    train_scene_ids: Optional[Set[int]] = None,
    scene_set: str = "heldout",
    episode_configs: Optional[Mapping[str, EpisodeConfig]] = None,
) -> EvalReport:
    """Run every policy on the same seeded episodes of the held-out scenes.

    ``episode_configs`` overrides the episode config per policy (ablations
    with a reduced action set); starts and thresholds stay shared.
    """
    check_disjoint(train_scene_ids, scenes)
    config = config or EvalConfig()
    episode = episode or EpisodeConfig()
    samples_seed = derive_seed(seed, "threshold")
    cache: Dict[int, ScoredSamples] = {
        s.scene_id: ScoredSamples.draw(s, scorer, episode.n_samples, samples_seed) for s in scenes
    }
    jobs = [
        (name, scene, j)
        for name in policies
        for scene in scenes
        for j in range(config.episodes_per_scene)
    ]

    def run(job: Tuple[str, SceneSpec, int]) -> EpisodeResult:
        name, scene, j = job
        env = CaptureEnv(
            scene,
            scorer,
            (episode_configs or {}).get(name, episode),
            counter=StepCounter(config.zeta, frozen=True),
            samples_seed=samples_seed,
            evaluation=True,
            policy_name=name,
            samples_cache=cache,
        )
        episode_seed = derive_seed(seed, "episode", scene.scene_id, j)
        env.reset(seed=episode_seed)
        transcript = policies[name](env, episode_seed)
        start = transcript.start_pose
        return EpisodeResult(
            policy=name,
            scene_id=scene.scene_id,
            episode=j,
            start_x=start.x,
            start_y=start.y,
            start_theta=start.theta,
            tau=transcript.threshold.tau,
            final_phi=transcript.final_phi,
            success=transcript.success,
            length=transcript.length,
        )

    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    summaries = [summarize(name, [r for r in results if r.policy == name]) for name in policies]
    report = EvalReport(
        scene_set=scene_set,
        scene_ids=[s.scene_id for s in scenes],
        styles=[s.style for s in scenes],
        seed=seed,
        episodes_per_scene=config.episodes_per_scene,
        results=summaries,
        episodes=results,
    )
    logger.info("evaluation done\n%s", report.summary())
    return report


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------
ABLATION_COLUMNS = ["variant", "accuracy", "stderr", "mean_len", "mean_phi", "n_actions"]


def ablation_variants(
    episode: Optional[EpisodeConfig] = None, policy_config: Optional[PolicyConfig] = None
) -> Dict[str, Tuple[EpisodeConfig, PolicyConfig]]:
    """The full method and six single-change variants."""
    episode = episode or EpisodeConfig()
    policy_config = policy_config or PolicyConfig()
    return {
        "full": (episode, policy_config),
        "no_score_diff": (episode.model_copy(update={"score_diff_term": False}), policy_config),
        "no_exploration": (episode.model_copy(update={"explore_term": False}), policy_config),
        "no_reward_terms": (
            episode.model_copy(update={"score_diff_term": False, "explore_term": False}),
            policy_config,
        ),
        "no_lstm": (episode, policy_config.model_copy(update={"recurrent": False})),
        "last_layer_features": (episode, policy_config.model_copy(update={"feature_mode": "last"})),
        "no_10_90_turns": (episode.model_copy(update={"action_set": NO_FINE_COARSE_TURNS}), policy_config),
    }


def ablation_suite(
    train_scenes: Sequence[SceneSpec],
    eval_scenes: Sequence[SceneSpec],
    scorer: ScorerParams,
    seed: int = 0,
    ppo: Optional[PPOConfig] = None,
    episode: Optional[EpisodeConfig] = None,
    policy_config: Optional[PolicyConfig] = None,
    config: Optional[EvalConfig] = None,
    variants: Optional[Sequence[str]] = None,
) -> pd.DataFrame:
    """Retrain each variant on the same budget and seed; evaluate on shared episodes."""
    check_disjoint({s.scene_id for s in train_scenes}, eval_scenes)
    table = ablation_variants(episode, policy_config)
    names = list(variants) if variants is not None else list(table)
    unknown = [n for n in names if n not in table]
    if unknown:
        raise ConfigError(f"unknown ablation variants {unknown}; expected some of {list(table)}")
    runners: Dict[str, EpisodeRunner] = {}
    configs: Dict[str, EpisodeConfig] = {}
    for name in names:
        variant_episode, variant_policy = table[name]
        logger.info("ablation variant %s", name)
        agent, _ = train(train_scenes, scorer, ppo, variant_episode, seed, variant_policy)
        runners[name] = make_runner("rl", scorer, agent)
        configs[name] = variant_episode
    report = evaluate(runners, eval_scenes, scorer, seed, config, episode, episode_configs=configs)
    rows = [
        {**report.result(name).model_dump(), "variant": name, "n_actions": len(configs[name].action_set)}
        for name in names
    ]
    return pd.DataFrame(rows, columns=ABLATION_COLUMNS)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------
HEATMAP_HEADINGS: Tuple[float, ...] = (0.0, 0.5 * math.pi, -math.pi, -0.5 * math.pi)


def field_map(scene: SceneSpec, scorer: Optional[Scorer] = None) -> np.ndarray:
    """Best score over the fixed heading slices at each navigable cell centre."""
    cells = scene.free_cells
    xs = (cells[:, 1] + 0.5) * scene.cell_size
    ys = (cells[:, 0] + 0.5) * scene.cell_size
    best = np.full(len(cells), -np.inf)
    for heading in HEATMAP_HEADINGS:
        thetas = np.full(len(cells), heading)
        if scorer is None:
            values = true_aesthetic_batch(scene, xs, ys, thetas)
        else:
            values = score_views(scorer, render_views(scene, xs, ys, thetas))
        best = np.maximum(best, values)
    heat = np.full(scene.grid.shape, np.nan)
    heat[cells[:, 0], cells[:, 1]] = best
    return heat


def path_vertices(transcript: EpisodeTranscript) -> np.ndarray:
    """(x, y) of the start and of the pose after every non-CAPTURE step."""
    poses = [transcript.start_pose] + [s.pose for s in transcript.steps if s.action is not Action.CAPTURE]
    return np.array([[p.x, p.y] for p in poses])


def render_trajectory(
    scene: SceneSpec,
    transcript: EpisodeTranscript,
    scorer: Optional[Scorer] = None,
) -> Tuple[str, np.ndarray]:
    """Top-down SVG of the episode and the polyline vertices drawn.

    The background is the true aesthetic field; with a scorer, a second panel
    shows the learned field over the same slices.
    """
    if transcript.scene_id != scene.scene_id:
        raise EpisodeError(f"transcript is for scene {transcript.scene_id}, not {scene.scene_id}")
    vertices = path_vertices(transcript)
    extent = (0.0, scene.world_width, 0.0, scene.world_height)
    panels = [("true aesthetic", field_map(scene))]
    if scorer is not None:
        panels.append(("learned score", field_map(scene, scorer)))

    fig = Figure(figsize=(5.0 * len(panels), 5.0))
    for i, (title, heat) in enumerate(panels):
        ax = fig.add_subplot(1, len(panels), i + 1)
        ax.imshow(scene.grid, cmap="Greys", vmin=0, vmax=1.5, origin="lower", extent=extent, interpolation="nearest")
        ax.imshow(heat, cmap="viridis", alpha=0.8, origin="lower", extent=extent, interpolation="nearest")
        if len(vertices) > 1:
            ax.plot(vertices[:, 0], vertices[:, 1], color="white", linewidth=1.2, label="path")
        ax.scatter(vertices[:, 0], vertices[:, 1], s=8, color="white", zorder=3, label="steps")
        end = transcript.steps[-1].pose if transcript.steps else transcript.start_pose
        marker_color = "lime" if transcript.success else "red"
        ax.scatter([end.x], [end.y], s=80, marker="*", color=marker_color, zorder=4, label="capture")
        ax.arrow(
            end.x,
            end.y,
            0.4 * math.cos(end.theta),
            0.4 * math.sin(end.theta),
            width=0.03,
            color=marker_color,
            zorder=4,
        )
        ax.set_title(f"scene {scene.scene_id}: {title}")
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        ax.legend(
            loc="upper right",
            fontsize="small",
            title=f"tau {transcript.threshold.tau:.3f}, phi {transcript.final_phi:.3f}",
            title_fontsize="small",
        )

    buffer = io.StringIO()
    with matplotlib.rc_context({"svg.hashsalt": "autophoto", "svg.fonttype": "none"}):
        fig.savefig(buffer, format="svg", metadata={"Date": None})
    return buffer.getvalue(), vertices

