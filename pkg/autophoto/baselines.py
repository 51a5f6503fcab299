"""Comparison policies sharing the CaptureEnv interface with the agent.

Greedy and key-frame selection use the two simulator privileges of the
environment (``probe`` and ``restore``) and run under a step budget; the
imitation baseline clones greedy hill-climbing demonstrations into the same
backbone as the agent, without the critic head.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from autophoto._utilities import DemonstrationError, derive_seed, rng_for
from autophoto.aesthetics import Scorer, ScorerParams, feature_batch, score_views
from autophoto.netcore import Tape, adam_init, adam_step, backward, forward
from autophoto.pomdp import (
    Action,
    CaptureEnv,
    EpisodeConfig,
    EpisodeTranscript,
    ScoredSamples,
    StepCounter,
    move,
)
from autophoto.policy import (
    PolicyConfig,
    PolicyParams,
    SequencePass,
    log_softmax,
    run_policy_episode,
    sequence_backward,
    sequence_forward,
)
from autophoto.scene import SceneSpec, render_views, salient_projection

logger = logging.getLogger(__name__)

THIRDS: Tuple[float, float] = (1.0 / 3.0, 2.0 / 3.0)


class BaselineBudget(BaseModel):
    """Step budget of the greedy and key-frame baselines."""

    model_config = ConfigDict(extra="forbid")

    max_total_steps: Optional[int] = Field(
        default=16, ge=1, description="Executed actions before the forced CAPTURE; None for the episode cap."
    )
    count_probes: bool = Field(default=True, description="Greedy probes count against the budget.")


def _movement_actions(env: CaptureEnv) -> List[Action]:
    return [a for a in env.config.action_set if a is not Action.CAPTURE]


# ---------------------------------------------------------------------------
# Random
# ---------------------------------------------------------------------------
def random_policy(env: CaptureEnv, rng: np.random.Generator) -> EpisodeTranscript:
    """Uniform over the whole action set, CAPTURE included."""
    done = False
    while not done:
        _, _, done, _, _ = env.step(int(rng.integers(len(env.config.action_set))))
    return env.transcript


# ---------------------------------------------------------------------------
# Rule of thirds
# ---------------------------------------------------------------------------
class ThirdsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tolerance: float = Field(default=0.04, gt=0, description="Alignment tolerance in viewport units.")
    coarse_above_deg: float = Field(default=25.0, gt=0, description="Bearing error switching 10 to 30 degree turns.")


def _first_available(preferred: Sequence[Action], action_set: Sequence[Action]) -> Action:
    for action in preferred:
        if action in action_set:
            return action
    return Action.CAPTURE


def rule_of_thirds_action(
    salient_x: Optional[float],
    fov_deg: float = 90.0,
    action_set: Sequence[Action] = tuple(Action),
    config: Optional[ThirdsConfig] = None,
) -> Action:
    """Next action given the salient object's viewport coordinate."""
    config = config or ThirdsConfig()
    if salient_x is None:
        return _first_available([Action.TURN_L90, Action.TURN_L30, Action.TURN_L10], action_set)
    errors = [salient_x - target for target in THIRDS]
    if min(abs(e) for e in errors) <= config.tolerance:
        return Action.CAPTURE
    # ties go to the left third
    error = errors[0] if abs(errors[0]) <= abs(errors[1]) + 1e-12 else errors[1]
    coarse = abs(error) * fov_deg > config.coarse_above_deg
    # a left turn moves objects rightwards in the viewport
    if error < 0:
        order = [Action.TURN_L30, Action.TURN_L10] if coarse else [Action.TURN_L10, Action.TURN_L30]
    else:
        order = [Action.TURN_R30, Action.TURN_R10] if coarse else [Action.TURN_R10, Action.TURN_R30]
    return _first_available(order, action_set)


def rule_of_thirds_policy(
    env: CaptureEnv, scene: Optional[SceneSpec] = None, config: Optional[ThirdsConfig] = None
) -> EpisodeTranscript:
    """Turn until the nearest salient object sits on a vertical third, then capture."""
    scene = scene or env.scene
    done = False
    while not done:
        assert env.pose is not None
        action = rule_of_thirds_action(
            salient_projection(scene, env.pose), scene.fov_deg, env.config.action_set, config
        )
        _, _, done, _, _ = env.step_action(action)
    return env.transcript


# ---------------------------------------------------------------------------
# Greedy
# ---------------------------------------------------------------------------
def greedy_policy(env: CaptureEnv, budget: Optional[BaselineBudget] = None) -> EpisodeTranscript:
    """Probe every movement, commit the best strict improvement, else capture.

    A decision needs its probes plus one committed step within the budget;
    when that no longer fits, CAPTURE is forced.
    """
    budget = budget or BaselineBudget()
    moves = _movement_actions(env)
    decision_cost = (len(moves) if budget.count_probes else 0) + 1
    used = 0
    while not env.transcript.terminated:
        if budget.max_total_steps is not None and used + decision_cost > budget.max_total_steps:
            logger.debug("greedy: budget of %d exhausted after %d actions", budget.max_total_steps, used)
            env.step_action(Action.CAPTURE)
            break
        phis = [env.probe(a) for a in moves]
        if budget.count_probes:
            used += len(moves)
        best = int(np.argmax(phis))
        if phis[best] > env.phi:
            env.step_action(moves[best])
            used += 1
        else:
            env.step_action(Action.CAPTURE)
    return env.transcript


# ---------------------------------------------------------------------------
# Key frame selection
# ---------------------------------------------------------------------------
def keyframe_policy(
    env: CaptureEnv, budget: Optional[BaselineBudget] = None, rng: Optional[np.random.Generator] = None
) -> EpisodeTranscript:
    """Random exploration, then a free teleport back to the best pose seen."""
    budget = budget or BaselineBudget()
    rng = rng or rng_for(0, "keyframe")
    moves = _movement_actions(env)
    n_explore = env.config.max_steps
    if budget.max_total_steps is not None:
        n_explore = min(n_explore, budget.max_total_steps)

    assert env.pose is not None
    best_pose, best_phi, best_index = env.pose, env.phi, 0
    for i in range(1, n_explore + 1):
        env.step_action(moves[int(rng.integers(len(moves)))])
        if env.phi > best_phi:
            best_pose, best_phi, best_index = env.pose, env.phi, i
    if best_index != n_explore:
        env.restore(best_pose)
    env.step_action(Action.CAPTURE)
    return env.transcript


# ---------------------------------------------------------------------------
# Imitation
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Demonstration:
    """Views seen and action-set indices taken along one successful hill climb."""

    scene_id: int
    views: np.ndarray
    actions: np.ndarray
    final_phi: float
    tau: float

    def __len__(self) -> int:
        return int(self.actions.size)


class ImitationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    count: int = Field(default=2000, ge=1, description="Demonstrations to keep.")
    attempts_per_demo: int = Field(default=20, ge=1, description="Attempt cap as a multiple of count.")
    epochs: int = Field(default=50, ge=1)
    lr: float = Field(default=1e-4, gt=0)
    lr_decay: float = Field(default=0.95, gt=0, le=1, description="Per-epoch exponential decay.")
    batch_size: int = Field(default=32, ge=1, description="Demonstrations per minibatch.")
    val_fraction: float = Field(default=0.1, ge=0, lt=1)


def _hill_climb(env: CaptureEnv) -> Tuple[np.ndarray, np.ndarray]:
    """Greedy ascent with full knowledge of neighbour scores; no probes logged."""
    scene = env.scene
    moves = _movement_actions(env)
    index = {a: i for i, a in enumerate(env.config.action_set)}
    views: List[np.ndarray] = []
    actions: List[int] = []
    done = False
    while not done:
        assert env.pose is not None and env.view is not None
        views.append(env.view)
        choice = Action.CAPTURE
        if env.t < env.config.max_steps:
            targets = [move(scene, env.pose, a) for a in moves]
            poses = [pose for pose, _ in targets]
            rendered = render_views(
                scene, [p.x for p in poses], [p.y for p in poses], [p.theta for p in poses]
            )
            phis = np.where([blocked for _, blocked in targets], env.phi, score_views(env.scorer, rendered))
            best = int(np.argmax(phis))
            if phis[best] > env.phi:
                choice = moves[best]
        actions.append(index[choice])
        _, _, done, _, _ = env.step_action(choice)
    return np.stack(views), np.asarray(actions, dtype=np.int64)


def generate_demonstrations(
    scenes: Sequence[SceneSpec],
    scorer: Scorer,
    count: int,
    seed: int = 0,
    episode: Optional[EpisodeConfig] = None,
    attempts_per_demo: int = 20,
) -> List[Demonstration]:
    """Hill climbs from random starts, kept only when the capture beats tau."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not scenes:
        raise ValueError("generate_demonstrations needs at least one scene")
    episode = episode or EpisodeConfig()
    cache: Dict[int, ScoredSamples] = {}
    counter = StepCounter(frozen=True)
    envs = {
        s.scene_id: CaptureEnv(
            s,
            scorer,
            episode,
            counter=counter,
            samples_seed=derive_seed(seed, "threshold"),
            evaluation=True,
            policy_name="demonstration",
            samples_cache=cache,
        )
        for s in scenes
    }
    demos: List[Demonstration] = []
    for attempt in range(count * attempts_per_demo):
        if len(demos) >= count:
            break
        scene = scenes[attempt % len(scenes)]
        env = envs[scene.scene_id]
        env.reset(seed=derive_seed(seed, "demo", attempt))
        views, actions = _hill_climb(env)
        transcript = env.transcript
        if transcript.success:
            demos.append(
                Demonstration(scene.scene_id, views, actions, transcript.final_phi, transcript.threshold.tau)
            )
        else:
            logger.debug(
                "demo %d rejected: phi %.3f <= tau %.3f", attempt, transcript.final_phi, transcript.threshold.tau
            )
    if not demos:
        raise DemonstrationError("no demonstration exceeded its threshold")
    logger.info("kept %d demonstrations", len(demos))
    return demos


class ImitationReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train_accuracy: float
    val_accuracy: Optional[float]
    n_train: int
    n_val: int
    epochs: int


def _pad(features: Sequence[np.ndarray], actions: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Time-major (L, B, F) features, (L, B) actions and a (L, B) validity mask."""
    length = max(a.size for a in actions)
    batch = len(actions)
    feats = np.zeros((length, batch, features[0].shape[1]))
    acts = np.zeros((length, batch), dtype=np.int64)
    mask = np.zeros((length, batch))
    for b, (f, a) in enumerate(zip(features, actions)):
        feats[: a.size, b] = f
        acts[: a.size, b] = a
        mask[: a.size, b] = 1.0
    return feats, acts, mask


def _actor_log_probs(policy: PolicyParams, feats: np.ndarray) -> Tuple[np.ndarray, SequencePass, Tape]:
    nets, parts = policy.nets(), policy.split()
    seq = sequence_forward(policy, feats, policy.zero_state(feats.shape[1]), np.zeros(feats.shape[:2]))
    logits, _, tape = forward(nets["actor"], parts["actor"], seq.hidden)
    return log_softmax(logits), seq, tape


def bc_loss_and_grad(
    policy: PolicyParams, feats: np.ndarray, actions: np.ndarray, mask: np.ndarray
) -> Tuple[float, np.ndarray]:
    """Masked mean cross-entropy of the demonstrated actions."""
    log_probs, seq, tape = _actor_log_probs(policy, feats)
    acts, valid = actions.ravel(), mask.ravel()
    count = valid.sum()
    rows = np.arange(acts.size)
    loss = -float(np.sum(valid * log_probs[rows, acts]) / count)
    one_hot = np.zeros_like(log_probs)
    one_hot[rows, acts] = 1.0
    d_logits = -(one_hot - np.exp(log_probs)) * (valid / count)[:, None]
    g_actor, d_hidden, _ = backward(tape, d_logits)
    g_backbone = sequence_backward(policy, seq, d_hidden)
    return loss, np.concatenate([g_backbone, g_actor])


def _accuracy(policy: PolicyParams, features: Sequence[np.ndarray], actions: Sequence[np.ndarray]) -> Optional[float]:
    if not actions:
        return None
    feats, acts, mask = _pad(features, actions)
    log_probs, _, _ = _actor_log_probs(policy, feats)
    hits = (np.argmax(log_probs, axis=1) == acts.ravel()) * mask.ravel()
    return float(hits.sum() / mask.sum())


def imitation_train(
    demos: Sequence[Demonstration],
    scorer: ScorerParams,
    config: Optional[ImitationConfig] = None,
    seed: int = 0,
    policy_config: Optional[PolicyConfig] = None,
    n_actions: int = 9,
) -> Tuple[PolicyParams, ImitationReport]:
    """Behaviour cloning on a 90/10 demonstration split; returns an actor-only policy."""
    if not demos:
        raise DemonstrationError("imitation_train needs at least one demonstration")
    config = config or ImitationConfig()
    policy_config = policy_config or PolicyConfig()
    rng = rng_for(seed, "imitation")
    order = rng.permutation(len(demos))
    n_val = min(int(round(config.val_fraction * len(demos))), len(demos) - 1)
    val_idx, train_idx = order[:n_val], order[n_val:]

    features = [feature_batch(scorer, d.views, policy_config.feature_mode) for d in demos]
    actions = [d.actions for d in demos]
    policy = PolicyParams.initialize(policy_config, n_actions, seed, critic=False)
    adam = adam_init(policy.params.size)
    params = policy.params
    logger.info(
        "cloning %d demonstrations (%d held out), config %s", len(train_idx), n_val, config.model_dump_json()
    )
    for epoch in range(config.epochs):
        lr = config.lr * config.lr_decay**epoch
        shuffled = rng.permutation(train_idx)
        losses = []
        for start in range(0, shuffled.size, config.batch_size):
            batch = shuffled[start : start + config.batch_size]
            feats, acts, mask = _pad([features[i] for i in batch], [actions[i] for i in batch])
            loss, grads = bc_loss_and_grad(policy.with_params(params), feats, acts, mask)
            params, adam = adam_step(params, grads, adam, lr)
            losses.append(loss)
        logger.debug("imitation epoch %d: loss %.4f, lr %.2e", epoch + 1, float(np.mean(losses)), lr)

    policy = policy.with_params(params)
    report = ImitationReport(
        train_accuracy=_accuracy(policy, [features[i] for i in train_idx], [actions[i] for i in train_idx]) or 0.0,
        val_accuracy=_accuracy(policy, [features[i] for i in val_idx], [actions[i] for i in val_idx]),
        n_train=int(train_idx.size),
        n_val=n_val,
        epochs=config.epochs,
    )
    logger.info("cloning accuracy: train %.3f, validation %s", report.train_accuracy, report.val_accuracy)
    return policy, report


def imitation_policy(env: CaptureEnv, policy: PolicyParams, scorer: ScorerParams) -> EpisodeTranscript:
    """Run an episode with the cloned actor, acting greedily."""
    return run_policy_episode(env, policy, scorer, mode="greedy")

