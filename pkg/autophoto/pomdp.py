"""The capture environment: actions, adaptive threshold and shaped reward.

Movement rewards are

    (phi(s_{t+1}) - phi(s_t)) + explore_coeff * explore_base**zeta - beta * t

with ``t`` the in-episode step (starting at 0) and ``zeta`` the global step
counter shared by every environment of a training run. CAPTURE pays +1 when
the captured score is strictly above the local threshold ``tau = mu + sigma``
and -1 otherwise.
"""

import json
import logging
import math
import threading
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Dict, List, Literal, NamedTuple, Optional, Tuple

import gymnasium as gym
import numpy as np
from gymnasium import spaces
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from autophoto._utilities import (
    EpisodeError,
    FormatError,
    SceneError,
    dumps_canonical,
    rng_for,
)
from autophoto.aesthetics import Scorer, score_views
from autophoto.scene import (
    VIEW_DIM,
    Pose,
    SceneSpec,
    is_navigable,
    render_views,
    sample_pose_arrays,
    sample_view_arrays,
)

logger = logging.getLogger(__name__)

EPISODE_FORMAT: str = "autophoto-episode/1"
STEP_LENGTH: float = 0.25


class Action(IntEnum):
    FORWARD = 0
    BACKWARD = 1
    TURN_L10 = 2
    TURN_L30 = 3
    TURN_L90 = 4
    TURN_R10 = 5
    TURN_R30 = 6
    TURN_R90 = 7
    CAPTURE = 8


MOVEMENT_ACTIONS: Tuple[Action, ...] = tuple(a for a in Action if a is not Action.CAPTURE)

# left turns are counter-clockwise (positive theta)
TURN_ANGLES: Dict[Action, float] = {
    Action.TURN_L10: math.radians(10.0),
    Action.TURN_L30: math.radians(30.0),
    Action.TURN_L90: math.radians(90.0),
    Action.TURN_R10: -math.radians(10.0),
    Action.TURN_R30: -math.radians(30.0),
    Action.TURN_R90: -math.radians(90.0),
}

ALL_ACTIONS: Tuple[Action, ...] = tuple(Action)
NO_FINE_COARSE_TURNS: Tuple[Action, ...] = tuple(
    a
    for a in Action
    if a not in (Action.TURN_L10, Action.TURN_R10, Action.TURN_L90, Action.TURN_R90)
)


class EpisodeConfig(BaseModel):
    """Episode cap, reward coefficients and threshold sampling."""

    model_config = ConfigDict(extra="forbid")

    max_steps: int = Field(default=48, ge=0, description="CAPTURE is forced at t == max_steps.")
    beta: float = Field(default=0.005, ge=0, description="Per-step penalty coefficient.")
    explore_coeff: float = Field(default=0.1, ge=0)
    explore_base: float = Field(default=0.9999, gt=0, lt=1)
    n_samples: int = Field(default=2000, ge=1, description="Views sampled per scene.")
    knn: int = Field(default=100, ge=1, description="Nearest samples forming the region.")
    resample_low_init: bool = Field(
        default=False,
        description="Redraw starts scoring below scene mean minus one std (training only).",
    )
    resample_cap: int = Field(default=100, ge=0)
    score_diff_term: bool = True
    explore_term: bool = True
    action_set: Tuple[Action, ...] = ALL_ACTIONS

    @field_validator("action_set", mode="before")
    @classmethod
    def _parse_actions(cls, value: Any) -> Any:
        if isinstance(value, (list, tuple)):
            return tuple(Action[v] if isinstance(v, str) else Action(v) for v in value)
        return value

    @model_validator(mode="after")
    def _check(self) -> "EpisodeConfig":
        if self.knn > self.n_samples:
            raise ValueError(f"knn ({self.knn}) must not exceed n_samples ({self.n_samples})")
        if Action.CAPTURE not in self.action_set:
            raise ValueError("action_set must contain CAPTURE")
        if len(set(self.action_set)) != len(self.action_set):
            raise ValueError("action_set has duplicates")
        return self


class ThresholdEstimate(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    mu: float
    sigma: float = Field(ge=0)
    tau: float
    scene_mu: float
    scene_sigma: float = Field(ge=0)
    k: int
    n: int

    @model_validator(mode="after")
    def _tau_is_mu_plus_sigma(self) -> "ThresholdEstimate":
        if self.tau != self.mu + self.sigma:
            raise ValueError("tau must equal mu + sigma")
        return self


def _mean_std(values: np.ndarray) -> Tuple[float, float]:
    """Population mean and std, independent of the order of ``values``."""
    n = values.size
    mean = math.fsum(values.tolist()) / n
    var = math.fsum(((values - mean) ** 2).tolist()) / n
    return mean, math.sqrt(var)


@dataclass(frozen=True)
class ScoredSamples:
    """The N sampled views of a scene and their learned scores."""

    xs: np.ndarray
    ys: np.ndarray
    scores: np.ndarray

    @classmethod
    def draw(cls, scene: SceneSpec, scorer: Scorer, n: int, seed: int) -> "ScoredSamples":
        xs, ys, _, views = sample_view_arrays(scene, n, seed)
        return cls(xs, ys, score_views(scorer, views))

    @property
    def scene_stats(self) -> Tuple[float, float]:
        return _mean_std(self.scores)

    def threshold(self, x: float, y: float, k: int) -> ThresholdEstimate:
        """Threshold of the ``k`` samples nearest (x, y); ties go to the lower index."""
        n = self.scores.size
        if not 1 <= k <= n:
            raise ValueError(f"knn must lie in [1, {n}], got {k}")
        d2 = (self.xs - x) ** 2 + (self.ys - y) ** 2
        nearest = np.argsort(d2, kind="stable")[:k]
        mu, sigma = _mean_std(np.sort(self.scores[nearest]))
        scene_mu, scene_sigma = self.scene_stats
        return ThresholdEstimate(
            mu=mu, sigma=sigma, tau=mu + sigma, scene_mu=scene_mu, scene_sigma=scene_sigma, k=k, n=n
        )


def compute_threshold(
    scene: SceneSpec,
    start_pose: Pose,
    scorer: Scorer,
    config: Optional[EpisodeConfig] = None,
    seed: int = 0,
    samples: Optional[ScoredSamples] = None,
) -> ThresholdEstimate:
    """tau = mu + sigma over the K sampled views nearest the start position."""
    config = config or EpisodeConfig()
    if samples is None:
        samples = ScoredSamples.draw(scene, scorer, config.n_samples, seed)
    return samples.threshold(start_pose.x, start_pose.y, config.knn)


# ---------------------------------------------------------------------------
# Rewards and dynamics
# ---------------------------------------------------------------------------
def exploration_bonus(zeta: int, config: EpisodeConfig) -> float:
    return config.explore_coeff * config.explore_base**zeta


def step_reward(phi_next: float, phi_curr: float, zeta: int, t: int, config: EpisodeConfig) -> float:
    reward = 0.0
    if config.score_diff_term:
        reward += phi_next - phi_curr
    if config.explore_term:
        reward += exploration_bonus(zeta, config)
    return reward - config.beta * t


def capture_reward(phi_final: float, tau: float) -> float:
    return 1.0 if phi_final > tau else -1.0


def move(scene: SceneSpec, pose: Pose, action: Action) -> Tuple[Pose, bool]:
    """Apply a movement action; returns the new pose and whether it was blocked."""
    if action in TURN_ANGLES:
        return Pose(x=pose.x, y=pose.y, theta=pose.theta + TURN_ANGLES[action]), False
    if action is Action.CAPTURE:
        return pose, False
    sign = 1.0 if action is Action.FORWARD else -1.0
    x = pose.x + sign * STEP_LENGTH * math.cos(pose.theta)
    y = pose.y + sign * STEP_LENGTH * math.sin(pose.theta)
    if not is_navigable(scene, x, y):
        return pose, True
    return Pose(x=x, y=y, theta=pose.theta), False


def render_pose(scene: SceneSpec, pose: Pose) -> np.ndarray:
    return render_views(scene, pose.x, pose.y, pose.theta)[0]


class EpisodeCounters(NamedTuple):
    t: int
    zeta: int
    done: bool = False


class StepResult(NamedTuple):
    pose: Pose
    view: np.ndarray
    reward: float
    done: bool
    phi: float
    action: Action
    forced: bool
    blocked: bool


def step(
    scene: SceneSpec,
    pose: Pose,
    action: Action,
    counters: EpisodeCounters,
    scorer: Scorer,
    threshold: ThresholdEstimate,
    config: EpisodeConfig,
    phi_curr: Optional[float] = None,
) -> StepResult:
    """One environment transition; ``phi_curr`` saves re-scoring the current view."""
    if counters.done:
        raise EpisodeError("cannot step a terminated episode")
    action = Action(action)
    if action not in config.action_set:
        raise EpisodeError(f"{action.name} is not in the configured action set")
    if phi_curr is None:
        phi_curr = float(score_views(scorer, render_pose(scene, pose))[0])

    forced = counters.t >= config.max_steps and action is not Action.CAPTURE
    if forced or action is Action.CAPTURE:
        view = render_pose(scene, pose)
        reward = capture_reward(phi_curr, threshold.tau)
        return StepResult(pose, view, reward, True, phi_curr, Action.CAPTURE, forced, False)

    next_pose, blocked = move(scene, pose, action)
    view = render_pose(scene, next_pose)
    phi_next = phi_curr if blocked else float(score_views(scorer, view)[0])
    reward = step_reward(phi_next, phi_curr, counters.zeta, counters.t, config)
    return StepResult(next_pose, view, reward, False, phi_next, action, False, blocked)


# ---------------------------------------------------------------------------
# Global step counter
# ---------------------------------------------------------------------------
class StepCounter:
    """Global step counter zeta, shared across environments of one run."""

    def __init__(self, value: int = 0, frozen: bool = False) -> None:
        self._value = value
        self.frozen = frozen
        self._lock = threading.Lock()

    @property
    def value(self) -> int:
        return self._value

    def advance(self) -> int:
        """Return zeta for the current step, then count it unless frozen."""
        with self._lock:
            zeta = self._value
            if not self.frozen:
                self._value += 1
            return zeta


# ---------------------------------------------------------------------------
# Transcripts
# ---------------------------------------------------------------------------
class TranscriptStep(BaseModel):
    model_config = ConfigDict(extra="forbid")

    t: int
    zeta: int
    pose: Pose = Field(description="Pose after the action.")
    action: Action
    phi: float = Field(description="Score of the view after the action.")
    reward: float
    done: bool = False
    forced: bool = False
    blocked: bool = False

    @field_validator("action", mode="before")
    @classmethod
    def _action_by_name(cls, value: Any) -> Any:
        return Action[value] if isinstance(value, str) else value

    def record(self) -> Dict[str, Any]:
        payload = self.model_dump()
        payload["action"] = self.action.name
        return payload


class PrivilegedEvent(BaseModel):
    """A simulator-privileged query: a probe of one action, or a teleport."""

    model_config = ConfigDict(extra="forbid")

    privileged: Literal["probe", "restore"]
    after_step: int = Field(description="Number of executed steps when it happened.")
    pose: Pose
    action: Optional[Action] = None
    phi: float

    @field_validator("action", mode="before")
    @classmethod
    def _action_by_name(cls, value: Any) -> Any:
        return Action[value] if isinstance(value, str) else value

    def record(self) -> Dict[str, Any]:
        payload = self.model_dump()
        payload["action"] = None if self.action is None else self.action.name
        return payload


class EpisodeTranscript(BaseModel):
    """Ordered record of one episode; rewards are re-derivable from it."""

    model_config = ConfigDict(extra="forbid")

    scene_id: int
    start_pose: Pose
    start_phi: float
    threshold: ThresholdEstimate
    config: EpisodeConfig
    policy: str = ""
    steps: List[TranscriptStep] = Field(default_factory=list)
    privileged: List[PrivilegedEvent] = Field(default_factory=list)

    @property
    def terminated(self) -> bool:
        return bool(self.steps) and self.steps[-1].done

    @property
    def final_phi(self) -> float:
        return self.steps[-1].phi if self.steps else self.start_phi

    @property
    def success(self) -> bool:
        return self.terminated and self.final_phi > self.threshold.tau

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def n_probes(self) -> int:
        return sum(e.privileged == "probe" for e in self.privileged)

    def phis(self) -> List[float]:
        return [self.start_phi] + [s.phi for s in self.steps]

    def poses(self) -> List[Pose]:
        return [self.start_pose] + [s.pose for s in self.steps]

    def append(self, entry: TranscriptStep) -> None:
        if self.terminated:
            raise EpisodeError("transcript already has its terminal entry")
        self.steps.append(entry)

    def recompute_rewards(self) -> List[float]:
        """Rewards re-derived from the recorded scores and counters."""
        restored = {e.after_step: e.phi for e in self.privileged if e.privileged == "restore"}
        rewards = []
        prev = self.start_phi
        for i, entry in enumerate(self.steps):
            prev = restored.get(i, prev)
            if entry.action is Action.CAPTURE:
                rewards.append(capture_reward(entry.phi, self.threshold.tau))
            else:
                rewards.append(step_reward(entry.phi, prev, entry.zeta, entry.t, self.config))
            prev = entry.phi
        return rewards

    def to_ndjson(self, meta: Optional[Dict[str, Any]] = None) -> str:
        header = {
            "format": EPISODE_FORMAT,
            "scene_id": self.scene_id,
            "policy": self.policy,
            "start_pose": self.start_pose.model_dump(),
            "start_phi": self.start_phi,
            "threshold": self.threshold.model_dump(),
            "config": json.loads(self.config.model_dump_json()),
            "meta": meta,
        }
        lines = [dumps_canonical(header)]
        lines += [dumps_canonical(s.record()) for s in self.steps]
        lines += [dumps_canonical(e.record()) for e in self.privileged]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_ndjson(cls, text: str) -> "EpisodeTranscript":
        lines = [line for line in text.splitlines() if line.strip()]
        if not lines:
            raise FormatError("empty transcript")
        try:
            header = json.loads(lines[0])
            if header.get("format") != EPISODE_FORMAT:
                raise FormatError(f"not a transcript: format {header.get('format')!r}")
            records = [json.loads(line) for line in lines[1:]]
            return cls(
                scene_id=header["scene_id"],
                policy=header.get("policy", ""),
                start_pose=Pose(**header["start_pose"]),
                start_phi=header["start_phi"],
                threshold=ThresholdEstimate(**header["threshold"]),
                config=EpisodeConfig(**header["config"]),
                steps=[TranscriptStep(**r) for r in records if "privileged" not in r],
                privileged=[PrivilegedEvent(**r) for r in records if "privileged" in r],
            )
        except (KeyError, ValueError) as e:
            raise FormatError(f"malformed transcript: {e}") from e


# ---------------------------------------------------------------------------
# Episode start
# ---------------------------------------------------------------------------
def reset(
    scene: SceneSpec,
    scorer: Scorer,
    config: Optional[EpisodeConfig] = None,
    seed: int = 0,
    samples: Optional[ScoredSamples] = None,
    evaluation: bool = False,
) -> Tuple[Pose, np.ndarray, ThresholdEstimate]:
    """Uniform navigable start, optionally redrawn while its score is low."""
    config = config or EpisodeConfig()
    if samples is None:
        samples = ScoredSamples.draw(scene, scorer, config.n_samples, seed)
    rng = rng_for(seed, "reset", scene.scene_id)
    resample = config.resample_low_init and not evaluation
    scene_mu, scene_sigma = samples.scene_stats

    for attempt in range(config.resample_cap + 1):
        xs, ys, thetas = sample_pose_arrays(scene, 1, rng)
        pose = Pose(x=float(xs[0]), y=float(ys[0]), theta=float(thetas[0]))
        view = render_pose(scene, pose)
        if not resample:
            break
        phi = float(score_views(scorer, view)[0])
        if phi >= scene_mu - scene_sigma:
            break
        logger.debug("scene %d: start score %.3f too low, redrawing", scene.scene_id, phi)
    else:
        logger.warning(
            "scene %d: start re-sampling cap (%d) reached, accepting", scene.scene_id, config.resample_cap
        )
    return pose, view, samples.threshold(pose.x, pose.y, config.knn)


# ---------------------------------------------------------------------------
# Gymnasium environment
# ---------------------------------------------------------------------------
class CaptureEnv(gym.Env):
    """Gymnasium wrapper around [reset]/[step] with a running transcript.

    Actions are indices into ``config.action_set``. ``probe`` and ``restore``
    are simulator privileges for the baselines; both are logged in the
    transcript's ``privileged`` list.
    """

    metadata: Dict[str, Any] = {"render_modes": []}

    def __init__(
        self,
        scene: SceneSpec,
        scorer: Scorer,
        config: Optional[EpisodeConfig] = None,
        counter: Optional[StepCounter] = None,
        samples_seed: int = 0,
        evaluation: bool = False,
        policy_name: str = "",
        samples_cache: Optional[Dict[int, ScoredSamples]] = None,
    ) -> None:
        super().__init__()
        self.config = config or EpisodeConfig()
        self.scorer = scorer
        self.counter = counter if counter is not None else StepCounter()
        self.samples_seed = samples_seed
        self.evaluation = evaluation
        self.policy_name = policy_name
        self.action_space = spaces.Discrete(len(self.config.action_set))
        self.observation_space = spaces.Box(-1.0, np.inf, shape=(VIEW_DIM,), dtype=np.float64)
        self._samples_cache: Dict[int, ScoredSamples] = (
            samples_cache if samples_cache is not None else {}
        )
        self._transcript: Optional[EpisodeTranscript] = None
        self.set_scene(scene)

    # -- scene management -------------------------------------------------
    def set_scene(self, scene: SceneSpec) -> None:
        self.scene = scene
        self._transcript = None
        self.pose: Optional[Pose] = None
        self.view: Optional[np.ndarray] = None
        self.phi = 0.0
        self.t = 0

    @property
    def samples(self) -> ScoredSamples:
        cached = self._samples_cache.get(self.scene.scene_id)
        if cached is None:
            cached = ScoredSamples.draw(self.scene, self.scorer, self.config.n_samples, self.samples_seed)
            self._samples_cache[self.scene.scene_id] = cached
        return cached

    @property
    def transcript(self) -> EpisodeTranscript:
        if self._transcript is None:
            raise EpisodeError("environment has not been reset")
        return self._transcript

    @property
    def threshold(self) -> ThresholdEstimate:
        return self.transcript.threshold

    # -- episode API --------------------------------------------------------
    def reset(
        self, *, seed: Optional[int] = None, options: Optional[Dict[str, Any]] = None
    ) -> Tuple[np.ndarray, Dict[str, Any]]:
        super().reset(seed=seed)
        if seed is None:
            seed = int(self.np_random.integers(2**31))
        pose, view, threshold = reset(
            self.scene, self.scorer, self.config, seed, self.samples, self.evaluation
        )
        if options and "start_pose" in options:
            pose = options["start_pose"]
            if not is_navigable(self.scene, pose.x, pose.y):
                raise SceneError(f"start pose {pose} is not navigable")
            view = render_pose(self.scene, pose)
            threshold = self.samples.threshold(pose.x, pose.y, self.config.knn)
        self.pose, self.view, self.t = pose, view, 0
        self.phi = float(score_views(self.scorer, view)[0])
        self._transcript = EpisodeTranscript(
            scene_id=self.scene.scene_id,
            start_pose=pose,
            start_phi=self.phi,
            threshold=threshold,
            config=self.config,
            policy=self.policy_name,
        )
        return view, self._info()

    def step(self, action: Any) -> Tuple[np.ndarray, float, bool, bool, Dict[str, Any]]:
        index = int(action)
        if not 0 <= index < len(self.config.action_set):
            raise EpisodeError(f"action index {index} outside the action set")
        return self.step_action(self.config.action_set[index])

    def step_action(self, action: Action) -> Tuple[np.ndarray, float, bool, bool, Dict[str, Any]]:
        """Step by action name rather than action-set index."""
        transcript = self.transcript
        if self.pose is None or transcript.terminated:
            raise EpisodeError("cannot step a terminated episode")
        zeta = self.counter.advance()
        result = step(
            self.scene,
            self.pose,
            action,
            EpisodeCounters(self.t, zeta),
            self.scorer,
            transcript.threshold,
            self.config,
            phi_curr=self.phi,
        )
        transcript.append(
            TranscriptStep(
                t=self.t,
                zeta=zeta,
                pose=result.pose,
                action=result.action,
                phi=result.phi,
                reward=result.reward,
                done=result.done,
                forced=result.forced,
                blocked=result.blocked,
            )
        )
        self.pose, self.view, self.phi = result.pose, result.view, result.phi
        self.t += 1
        info = self._info()
        info.update(
            action=result.action,
            forced=result.forced,
            blocked=result.blocked,
            success=result.done and result.phi > transcript.threshold.tau,
        )
        return result.view, result.reward, result.done, False, info

    def _info(self) -> Dict[str, Any]:
        return {"phi": self.phi, "t": self.t, "pose": self.pose, "threshold": self.transcript.threshold}

    # -- simulator privileges -------------------------------------------------
    def probe(self, action: Action) -> float:
        """Score the view one movement action would produce, without moving."""
        if self.pose is None or self.transcript.terminated:
            raise EpisodeError("cannot probe a terminated episode")
        if action is Action.CAPTURE:
            raise EpisodeError("CAPTURE cannot be probed")
        pose, blocked = move(self.scene, self.pose, action)
        phi = self.phi if blocked else float(score_views(self.scorer, render_pose(self.scene, pose))[0])
        self.transcript.privileged.append(
            PrivilegedEvent(privileged="probe", after_step=self.t, pose=pose, action=action, phi=phi)
        )
        return phi

    def restore(self, pose: Pose) -> np.ndarray:
        """Teleport to a previously recorded pose."""
        if self.pose is None or self.transcript.terminated:
            raise EpisodeError("cannot restore in a terminated episode")
        if not is_navigable(self.scene, pose.x, pose.y):
            raise SceneError(f"restore target {pose} is not navigable")
        self.pose = pose
        self.view = render_pose(self.scene, pose)
        self.phi = float(score_views(self.scorer, self.view)[0])
        self.transcript.privileged.append(
            PrivilegedEvent(privileged="restore", after_step=self.t, pose=pose, phi=self.phi)
        )
        return self.view

