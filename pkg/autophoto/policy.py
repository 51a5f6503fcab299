"""Recurrent actor-critic over scorer features, trained with clipped PPO.

The backbone is ``features -> dense(hidden, tanh) -> lstm_cell(hidden)``
(or a second dense tanh layer of the same width when ``recurrent`` is off);
the actor head maps the hidden state to action logits and the critic head to
a scalar value. Minibatches are whole per-environment sequences so that the
recurrent state can be re-derived by back-propagation through time over the
full rollout horizon, resetting at episode boundaries.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from autophoto._utilities import (
    FormatError,
    NumericalError,
    csv_preamble,
    derive_seed,
    require_finite,
    rng_for,
)
from autophoto.aesthetics import FEATURE_DIM, LAST_LAYER_DIM, ScorerParams, feature_batch
from autophoto.netcore import (
    AdamState,
    DenseLayer,
    LSTMCellLayer,
    NetSpec,
    RecurrentState,
    Tape,
    adam_init,
    adam_step,
    backward,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from autophoto.pomdp import CaptureEnv, EpisodeConfig, EpisodeTranscript, ScoredSamples, StepCounter
from autophoto.scene import SceneSpec

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "update",
    "env_steps",
    "mean_reward",
    "capture_acc",
    "mean_len",
    "policy_loss",
    "value_loss",
    "entropy",
]


class PolicyConfig(BaseModel):
    """Network shape of the agent."""

    model_config = ConfigDict(extra="forbid")

    feature_mode: Literal["multilayer", "last"] = Field(
        default="multilayer",
        description="All scorer hidden layers (160) or only the last one (32).",
    )
    recurrent: bool = Field(default=True, description="LSTM cell, or a dense layer of equal width.")
    hidden: int = Field(default=128, ge=1)
    actor_gain: float = Field(default=0.01, gt=0, description="Init gain of the actor head.")

    @property
    def feature_dim(self) -> int:
        return FEATURE_DIM if self.feature_mode == "multilayer" else LAST_LAYER_DIM


class PPOConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gamma: float = Field(default=0.99, ge=0, le=1)
    gae_lambda: float = Field(default=0.95, ge=0, le=1)
    clip: float = Field(default=0.2, gt=0)
    epochs: int = Field(default=4, ge=1)
    minibatch: int = Field(default=64, ge=1, description="Samples per minibatch (whole sequences).")
    lr: float = Field(default=3e-4, ge=0)
    entropy_coeff: float = Field(default=0.01, ge=0)
    value_coeff: float = Field(default=0.5, ge=0)
    horizon: int = Field(default=128, ge=1)
    n_envs: int = Field(default=8, ge=1)
    scene_switch_every: int = Field(default=250, ge=1, description="Episodes per env between scene swaps.")
    total_steps: int = Field(default=200_000, ge=1)


def backbone_spec(config: PolicyConfig) -> NetSpec:
    h = config.hidden
    second: Union[LSTMCellLayer, DenseLayer] = (
        LSTMCellLayer(n_in=h, hidden=h) if config.recurrent else DenseLayer(n_in=h, n_out=h, activation="tanh")
    )
    return NetSpec(layers=(DenseLayer(n_in=config.feature_dim, n_out=h, activation="tanh"), second))


class PolicyParams(BaseModel):
    """Actor-critic parameters: [backbone | actor | critic] in one vector."""

    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    config: PolicyConfig = Field(default_factory=PolicyConfig)
    n_actions: int = Field(default=9, ge=2)
    critic: bool = Field(default=True, description="False for behaviour-cloned actors.")
    params: np.ndarray

    @model_validator(mode="after")
    def _check_size(self) -> "PolicyParams":
        expected = sum(spec.param_count for spec in self.nets().values())
        if self.params.shape != (expected,):
            raise ValueError(f"expected {expected} parameters, got shape {self.params.shape}")
        require_finite(self.params, "policy parameters")
        return self

    def nets(self) -> Dict[str, NetSpec]:
        h = self.config.hidden
        nets = {
            "backbone": backbone_spec(self.config),
            "actor": NetSpec.mlp([h, self.n_actions]),
        }
        if self.critic:
            nets["critic"] = NetSpec.mlp([h, 1])
        return nets

    def split(self) -> Dict[str, np.ndarray]:
        parts, start = {}, 0
        for name, spec in self.nets().items():
            parts[name] = self.params[start : start + spec.param_count]
            start += spec.param_count
        return parts

    def with_params(self, params: np.ndarray) -> "PolicyParams":
        return PolicyParams(config=self.config, n_actions=self.n_actions, critic=self.critic, params=params)

    def zero_state(self, batch: int) -> RecurrentState:
        h = backbone_spec(self.config).hidden_size
        return RecurrentState(np.zeros((batch, h)), np.zeros((batch, h)))

    @classmethod
    def zeros(cls, config: Optional[PolicyConfig] = None, n_actions: int = 9, critic: bool = True) -> "PolicyParams":
        config = config or PolicyConfig()
        probe = cls.model_construct(config=config, n_actions=n_actions, critic=critic)
        count = sum(spec.param_count for spec in probe.nets().values())
        return cls(config=config, n_actions=n_actions, critic=critic, params=np.zeros(count))

    @classmethod
    def initialize(
        cls,
        config: Optional[PolicyConfig] = None,
        n_actions: int = 9,
        seed: int = 0,
        critic: bool = True,
    ) -> "PolicyParams":
        config = config or PolicyConfig()
        probe = cls.model_construct(config=config, n_actions=n_actions, critic=critic)
        rng = rng_for(seed, "policy_init")
        gains = {"backbone": None, "actor": [config.actor_gain], "critic": [1.0]}
        chunks = [init_params(spec, rng, gains[name]) for name, spec in probe.nets().items()]
        return cls(config=config, n_actions=n_actions, critic=critic, params=np.concatenate(chunks))


# ---------------------------------------------------------------------------
# Acting
# ---------------------------------------------------------------------------
def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def sample_actions(log_probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw of one action per row of (B, A) log-probabilities."""
    cdf = np.cumsum(np.exp(log_probs), axis=-1)
    u = rng.random(cdf.shape[0]) * cdf[:, -1]
    return np.minimum((cdf <= u[:, None]).sum(axis=-1), cdf.shape[1] - 1)


@dataclass(frozen=True)
class HeadOutputs:
    log_probs: np.ndarray
    values: np.ndarray
    state: RecurrentState
    hidden: np.ndarray
    tapes: Tuple[Tape, ...]


def _heads(policy: PolicyParams, features: np.ndarray, state: RecurrentState) -> HeadOutputs:
    nets, parts = policy.nets(), policy.split()
    hidden, new_state, tape_b = forward(nets["backbone"], parts["backbone"], features, state)
    logits, _, tape_a = forward(nets["actor"], parts["actor"], hidden)
    tapes = [tape_b, tape_a]
    if policy.critic:
        values, _, tape_c = forward(nets["critic"], parts["critic"], hidden)
        tapes.append(tape_c)
        values = values[:, 0]
    else:
        values = np.zeros(hidden.shape[0])
    return HeadOutputs(log_softmax(logits), values, new_state, hidden, tuple(tapes))


def act_batch(
    policy: PolicyParams,
    features: np.ndarray,
    state: RecurrentState,
    mode: Literal["sample", "greedy"] = "sample",
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, RecurrentState]:
    features = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise NumericalError("policy features contain non-finite values")
    out = _heads(policy, features, state)
    if mode == "greedy":
        actions = np.argmax(out.log_probs, axis=-1)
    else:
        if rng is None:
            raise ValueError("sampling needs an rng")
        actions = sample_actions(out.log_probs, rng)
    log_prob = out.log_probs[np.arange(actions.size), actions]
    return actions, log_prob, out.values, out.state


def act(
    policy: PolicyParams,
    features: np.ndarray,
    state: RecurrentState,
    mode: Literal["sample", "greedy"] = "sample",
    rng: Optional[np.random.Generator] = None,
) -> Tuple[int, float, float, RecurrentState]:
    """One decision for a single feature vector and its (H,) recurrent state."""
    batch_state = RecurrentState(np.atleast_2d(state.hidden), np.atleast_2d(state.cell))
    actions, log_prob, values, new_state = act_batch(
        policy, np.atleast_2d(features), batch_state, mode, rng
    )
    return int(actions[0]), float(log_prob[0]), float(values[0]), RecurrentState(new_state.hidden[0], new_state.cell[0])


def action_probabilities(policy: PolicyParams, features: np.ndarray, state: RecurrentState) -> np.ndarray:
    batch_state = RecurrentState(np.atleast_2d(state.hidden), np.atleast_2d(state.cell))
    return np.exp(_heads(policy, np.atleast_2d(features), batch_state).log_probs[0])


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SequencePass:
    """Backbone outputs of a (T, B) sequence and the tapes to differentiate it."""

    hidden: np.ndarray
    tapes: Tuple[Tape, ...]
    masks: np.ndarray


def sequence_forward(
    policy: PolicyParams,
    features: np.ndarray,
    state: RecurrentState,
    resets: np.ndarray,
) -> SequencePass:
    """Run the backbone over (T, B, F) features from ``state``.

    ``resets[t, b]`` zeroes the recurrent state before step ``t``. Returns
    hidden outputs flattened time-major to (T * B, H).
    """
    nets, parts = policy.nets(), policy.split()
    masks = (1.0 - np.asarray(resets, dtype=np.float64))[:, :, None]
    tapes = []
    outputs = []
    for t in range(features.shape[0]):
        state = RecurrentState(state.hidden * masks[t], state.cell * masks[t])
        hidden, state, tape = forward(nets["backbone"], parts["backbone"], features[t], state)
        tapes.append(tape)
        outputs.append(hidden)
    return SequencePass(np.concatenate(outputs), tuple(tapes), masks)


def sequence_backward(policy: PolicyParams, seq: SequencePass, d_hidden: np.ndarray) -> np.ndarray:
    """Backbone gradient by back-propagation through the whole sequence."""
    horizon = len(seq.tapes)
    d_hidden = d_hidden.reshape(horizon, -1, d_hidden.shape[-1])
    grads = np.zeros(policy.nets()["backbone"].param_count)
    carry: Optional[RecurrentState] = None
    for t in reversed(range(horizon)):
        g, _, d_state = backward(seq.tapes[t], d_hidden[t], carry)
        grads += g
        carry = RecurrentState(d_state.hidden * seq.masks[t], d_state.cell * seq.masks[t])
    return grads


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------
@dataclass
class RolloutBuffer:
    """(horizon, n_envs) records; advantages and returns are filled by GAE."""

    features: np.ndarray
    hidden: np.ndarray
    cell: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    last_values: np.ndarray
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None
    episodes: List["EpisodeStats"] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return int(self.rewards.shape[0])

    @property
    def n_envs(self) -> int:
        return int(self.rewards.shape[1])

    def __len__(self) -> int:
        return self.horizon * self.n_envs


@dataclass(frozen=True)
class EpisodeStats:
    total_reward: float
    success: bool
    length: int


Featurize = Callable[[np.ndarray], np.ndarray]


class RolloutWorker:
    """Steps a set of environments in lockstep and carries their state over.

    Any environment with the gymnasium ``reset``/``step`` signatures works;
    ``set_scene`` is only called when a scene pool is given.
    """

    def __init__(
        self,
        envs: Sequence[Any],
        featurize: Featurize,
        seed: int = 0,
        scenes: Optional[Sequence[SceneSpec]] = None,
        scene_switch_every: int = 250,
    ) -> None:
        self.envs = list(envs)
        self.featurize = featurize
        self.rng = rng_for(seed, "rollouts")
        self.scenes = list(scenes) if scenes else None
        self.scene_switch_every = scene_switch_every
        self.episodes_on_scene = [0] * len(self.envs)
        self.returns = np.zeros(len(self.envs))
        self.lengths = np.zeros(len(self.envs), dtype=np.int64)
        self.state: Optional[RecurrentState] = None
        if self.scenes:
            for env in self.envs:
                env.set_scene(self._draw_scene())
        self.obs = np.stack([self._reset(env) for env in self.envs])

    def _draw_scene(self) -> SceneSpec:
        assert self.scenes
        return self.scenes[int(self.rng.integers(len(self.scenes)))]

    def _reset(self, env: Any) -> np.ndarray:
        obs, _ = env.reset(seed=int(self.rng.integers(2**31)))
        return np.asarray(obs, dtype=np.float64)

    def _end_episode(self, e: int, success: bool) -> EpisodeStats:
        stats = EpisodeStats(float(self.returns[e]), success, int(self.lengths[e]))
        self.returns[e], self.lengths[e] = 0.0, 0
        self.episodes_on_scene[e] += 1
        if self.scenes and self.episodes_on_scene[e] >= self.scene_switch_every:
            self.envs[e].set_scene(self._draw_scene())
            self.episodes_on_scene[e] = 0
        return stats

    def collect(self, policy: PolicyParams, horizon: int) -> RolloutBuffer:
        n = len(self.envs)
        if self.state is None:
            self.state = policy.zero_state(n)
        features = self.featurize(self.obs)
        width = self.state.hidden.shape[1]
        buf = RolloutBuffer(
            features=np.zeros((horizon, n, features.shape[1])),
            hidden=np.zeros((horizon, n, width)),
            cell=np.zeros((horizon, n, width)),
            actions=np.zeros((horizon, n), dtype=np.int64),
            log_probs=np.zeros((horizon, n)),
            rewards=np.zeros((horizon, n)),
            values=np.zeros((horizon, n)),
            dones=np.zeros((horizon, n)),
            last_values=np.zeros(n),
        )
        for t in range(horizon):
            buf.features[t], buf.hidden[t], buf.cell[t] = features, self.state.hidden, self.state.cell
            actions, log_probs, values, state = act_batch(policy, features, self.state, "sample", self.rng)
            buf.actions[t], buf.log_probs[t], buf.values[t] = actions, log_probs, values
            hidden, cell = state.hidden.copy(), state.cell.copy()
            for e, env in enumerate(self.envs):
                obs, reward, terminated, truncated, info = env.step(int(actions[e]))
                buf.rewards[t, e] = reward
                self.returns[e] += reward
                self.lengths[e] += 1
                if terminated or truncated:
                    buf.dones[t, e] = 1.0
                    buf.episodes.append(self._end_episode(e, bool(info.get("success", False))))
                    obs = self._reset(env)
                    hidden[e], cell[e] = 0.0, 0.0
                self.obs[e] = obs
            self.state = RecurrentState(hidden, cell)
            features = self.featurize(self.obs)
        buf.last_values = _heads(policy, features, self.state).values
        return buf


def collect_rollouts(worker: RolloutWorker, policy: PolicyParams, horizon: int) -> RolloutBuffer:
    return worker.collect(policy, horizon)


def gae_advantages(buffer: RolloutBuffer, gamma: float, gae_lambda: float) -> RolloutBuffer:
    """Generalised advantage estimation, bootstrapping cut at dones."""
    advantages = np.zeros_like(buffer.rewards)
    gae = np.zeros(buffer.n_envs)
    next_values = buffer.last_values
    for t in reversed(range(buffer.horizon)):
        nonterminal = 1.0 - buffer.dones[t]
        delta = buffer.rewards[t] + gamma * next_values * nonterminal - buffer.values[t]
        gae = delta + gamma * gae_lambda * nonterminal * gae
        advantages[t] = gae
        next_values = buffer.values[t]
    buffer.advantages = advantages
    buffer.returns = advantages + buffer.values
    return buffer


# ---------------------------------------------------------------------------
# PPO
# ---------------------------------------------------------------------------
def ppo_loss_and_grad(
    policy: PolicyParams,
    buffer: RolloutBuffer,
    env_indices: np.ndarray,
    advantages: np.ndarray,
    config: PPOConfig,
) -> Tuple[float, np.ndarray, Dict[str, float]]:
    """Clipped PPO loss on whole env sequences and its exact gradient.

    ``advantages`` is the (already normalised) (horizon, n_envs) array.
    """
    if buffer.returns is None:
        raise ValueError("run gae_advantages before computing the PPO loss")
    nets, parts = policy.nets(), policy.split()
    idx = np.asarray(env_indices)
    horizon, batch = buffer.horizon, idx.size
    n = horizon * batch

    resets = np.zeros((horizon, batch))
    resets[1:] = buffer.dones[:-1, idx]
    seq = sequence_forward(
        policy, buffer.features[:, idx], RecurrentState(buffer.hidden[0, idx], buffer.cell[0, idx]), resets
    )
    hidden_all = seq.hidden

    logits, _, tape_a = forward(nets["actor"], parts["actor"], hidden_all)
    values, _, tape_c = forward(nets["critic"], parts["critic"], hidden_all)
    values = values[:, 0]
    log_probs = log_softmax(logits)
    probs = np.exp(log_probs)
    actions = buffer.actions[:, idx].ravel()
    adv = advantages[:, idx].ravel()
    returns = buffer.returns[:, idx].ravel()
    old_log_probs = buffer.log_probs[:, idx].ravel()

    rows = np.arange(n)
    ratio = np.exp(log_probs[rows, actions] - old_log_probs)
    clipped = np.clip(ratio, 1.0 - config.clip, 1.0 + config.clip)
    surr1, surr2 = ratio * adv, clipped * adv
    policy_loss = -float(np.mean(np.minimum(surr1, surr2)))
    value_loss = float(np.mean((values - returns) ** 2))
    entropy_per = -(probs * log_probs).sum(axis=1)
    entropy = float(np.mean(entropy_per))
    loss = policy_loss + config.value_coeff * value_loss - config.entropy_coeff * entropy

    d_logp = np.where(surr1 <= surr2, -adv / n, 0.0) * ratio
    one_hot = np.zeros_like(probs)
    one_hot[rows, actions] = 1.0
    d_logits = d_logp[:, None] * (one_hot - probs)
    d_logits += config.entropy_coeff / n * probs * (log_probs + entropy_per[:, None])
    d_values = 2.0 * config.value_coeff * (values - returns) / n

    g_actor, d_hidden_a, _ = backward(tape_a, d_logits)
    g_critic, d_hidden_c, _ = backward(tape_c, d_values[:, None])
    g_backbone = sequence_backward(policy, seq, d_hidden_a + d_hidden_c)

    grads = np.concatenate([g_backbone, g_actor, g_critic])
    stats = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > config.clip)),
        "loss": loss,
    }
    return loss, grads, stats


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    return (advantages - advantages.mean()) / (advantages.std() + 1e-8)


def ppo_update(
    policy: PolicyParams,
    buffer: RolloutBuffer,
    config: PPOConfig,
    adam: Optional[AdamState] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[PolicyParams, AdamState, Dict[str, float]]:
    """Epochs of Adam steps over shuffled whole-sequence minibatches."""
    if buffer.advantages is None:
        raise ValueError("run gae_advantages before ppo_update")
    initial = adam or adam_init(policy.params.size)
    adam = initial
    rng = rng or rng_for(0, "ppo_update")
    advantages = normalize_advantages(buffer.advantages)
    per_batch = max(1, config.minibatch // buffer.horizon)
    params = policy.params
    history: List[Dict[str, float]] = []
    for _ in range(config.epochs):
        order = rng.permutation(buffer.n_envs)
        for start in range(0, buffer.n_envs, per_batch):
            current = policy.with_params(params)
            loss, grads, stats = ppo_loss_and_grad(
                current, buffer, order[start : start + per_batch], advantages, config
            )
            if not (math.isfinite(loss) and np.all(np.isfinite(grads))):
                logger.warning("non-finite PPO loss (%s); update skipped", loss)
                return policy, initial, {"skipped": 1.0, **stats}
            params, adam = adam_step(params, grads, adam, config.lr)
            history.append(stats)
    summary = {key: float(np.mean([h[key] for h in history])) for key in history[0]}
    return policy.with_params(params), adam, summary


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------
def scorer_featurizer(scorer: ScorerParams, mode: str) -> Featurize:
    return lambda obs: feature_batch(scorer, obs, mode)


def train(
    scenes: Sequence[SceneSpec],
    scorer: ScorerParams,
    ppo: Optional[PPOConfig] = None,
    episode: Optional[EpisodeConfig] = None,
    seed: int = 0,
    policy_config: Optional[PolicyConfig] = None,
) -> Tuple[PolicyParams, pd.DataFrame]:
    """Collect, estimate advantages, update; repeat for ``total_steps``."""
    if not scenes:
        raise ValueError("train needs at least one scene")
    ppo = ppo or PPOConfig()
    episode = episode or EpisodeConfig()
    policy_config = policy_config or PolicyConfig()

    counter = StepCounter()
    cache: Dict[int, ScoredSamples] = {}
    envs = [
        CaptureEnv(
            scenes[0],
            scorer,
            episode,
            counter=counter,
            samples_seed=derive_seed(seed, "threshold"),
            samples_cache=cache,
        )
        for _ in range(ppo.n_envs)
    ]
    worker = RolloutWorker(
        envs,
        scorer_featurizer(scorer, policy_config.feature_mode),
        seed=derive_seed(seed, "worker"),
        scenes=scenes,
        scene_switch_every=ppo.scene_switch_every,
    )
    policy = PolicyParams.initialize(policy_config, len(episode.action_set), seed)
    adam = adam_init(policy.params.size)
    update_rng = rng_for(seed, "ppo_minibatches")
    n_updates = max(1, ppo.total_steps // (ppo.n_envs * ppo.horizon))
    logger.info(
        "training agent on %d scenes: %d updates, ppo %s, episode %s, policy %s",
        len(scenes),
        n_updates,
        ppo.model_dump_json(),
        episode.model_dump_json(),
        policy_config.model_dump_json(),
    )

    rows: List[Dict[str, Any]] = []
    for update in range(1, n_updates + 1):
        buffer = gae_advantages(worker.collect(policy, ppo.horizon), ppo.gamma, ppo.gae_lambda)
        policy, adam, stats = ppo_update(policy, buffer, ppo, adam, update_rng)
        finished = buffer.episodes
        row = {
            "update": update,
            "env_steps": counter.value,
            "mean_reward": float(np.mean([e.total_reward for e in finished])) if finished else float("nan"),
            "capture_acc": float(np.mean([e.success for e in finished])) if finished else float("nan"),
            "mean_len": float(np.mean([e.length for e in finished])) if finished else float("nan"),
            "policy_loss": stats["policy_loss"],
            "value_loss": stats["value_loss"],
            "entropy": stats["entropy"],
        }
        rows.append(row)
        logger.info(
            "update %d: env_steps %d, reward %.3f, capture acc %.3f, len %.1f",
            update,
            row["env_steps"],
            row["mean_reward"],
            row["capture_acc"],
            row["mean_len"],
        )
    return policy, pd.DataFrame(rows, columns=METRIC_COLUMNS)


def metrics_to_csv(metrics: pd.DataFrame, run_config: Optional[Dict[str, Any]] = None) -> str:
    return csv_preamble(run_config) + metrics.to_csv(index=False, float_format="%.6f")


# ---------------------------------------------------------------------------
# Running a trained policy
# ---------------------------------------------------------------------------
def run_policy_episode(
    env: CaptureEnv,
    policy: PolicyParams,
    scorer: ScorerParams,
    mode: Literal["sample", "greedy"] = "greedy",
    rng: Optional[np.random.Generator] = None,
) -> EpisodeTranscript:
    """Finish the current episode of a reset env with the policy acting."""
    if env.view is None:
        raise ValueError("reset the environment before running a policy")
    obs = env.view
    state = policy.zero_state(1)
    done = env.transcript.terminated
    while not done:
        features = feature_batch(scorer, obs[None, :], policy.config.feature_mode)
        actions, _, _, state = act_batch(policy, features, state, mode, rng)
        obs, _, done, truncated, _ = env.step(int(actions[0]))
        done = done or truncated
    return env.transcript


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
def save_policy(
    path: Union[str, Path],
    policy: PolicyParams,
    extra: Optional[Dict[str, Any]] = None,
) -> None:
    payload = {
        "policy_config": json.loads(policy.config.model_dump_json()),
        "n_actions": policy.n_actions,
        "critic": policy.critic,
        **(extra or {}),
    }
    save_checkpoint(path, policy.nets(), policy.params, payload)


def load_policy(path: Union[str, Path]) -> PolicyParams:
    checkpoint = load_checkpoint(path)
    try:
        return PolicyParams(
            config=PolicyConfig(**checkpoint.extra["policy_config"]),
            n_actions=checkpoint.extra["n_actions"],
            critic=checkpoint.extra["critic"],
            params=checkpoint.params,
        )
    except (KeyError, ValueError) as e:
        raise FormatError(f"{path}: not a policy checkpoint ({e})") from e
