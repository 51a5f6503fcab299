"""The learned aesthetic scorer: ranking plus exposure/jitter robustness.

The scorer is a 35 -> 64 -> 64 -> 32 -> 1 tanh MLP over view vectors. It is
trained on pairs of views from the same scene, labelled by the ground-truth
field, with

    total = lambda * rank + (1 - lambda) * (lambda_sim * sim + lambda_expo * expo)

where ``rank`` is the unit-margin hinge, ``sim`` half the squared score change
under a tiny pose jitter and ``expo`` the hinge between a view and its over-
or under-exposed copy. Hidden activations double as the agent's features.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from autophoto._utilities import FormatError, SceneError, csv_preamble, derive_seed, rng_for
from autophoto.netcore import (
    NetSpec,
    adam_init,
    adam_step,
    backward,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    validate_params,
)
from autophoto.scene import (
    VIEW_DIM,
    Pose,
    SceneSpec,
    ViewObservation,
    expose,
    navigable_mask,
    render_views,
    sample_view_arrays,
    true_aesthetic_batch,
)

logger = logging.getLogger(__name__)

SCORER_SPEC: NetSpec = NetSpec.mlp([VIEW_DIM, 64, 64, 32, 1])
FEATURE_DIM: int = 64 + 64 + 32
LAST_LAYER_DIM: int = 32

ScoreFn = Callable[[np.ndarray], np.ndarray]


class RobustnessConfig(BaseModel):
    """Loss weights and perturbation bounds of the combined scorer loss."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    lam: float = Field(
        default=0.6, alias="lambda", gt=0, lt=1, description="Weight on the rank term."
    )
    lambda_sim: float = Field(default=0.875, ge=0, le=1)
    lambda_expo: float = Field(default=0.125, ge=0, le=1)
    over_exposure: float = Field(default=4.0, gt=1)
    under_exposure: float = Field(default=0.5, gt=0, lt=1)
    jitter_translation: float = Field(
        default=0.02, ge=0, le=0.02, description="Max jitter translation in metres."
    )
    jitter_rotation_deg: float = Field(
        default=1.0, ge=0, le=1.0, description="Max jitter rotation in degrees."
    )

    @model_validator(mode="after")
    def _weights_sum_to_one(self) -> "RobustnessConfig":
        if abs(self.lambda_sim + self.lambda_expo - 1.0) > 1e-12:
            raise ValueError("lambda_sim + lambda_expo must equal 1")
        return self


class ScorerTrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    iters: int = Field(default=20_000, ge=0)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=1e-3, ge=0)
    ambiguous_gap: float = Field(
        default=0.05, ge=0, description="Pairs with a smaller true gap are skipped."
    )
    pool_size: int = Field(
        default=4000, ge=2, description="Views drawn per scene with sample_views."
    )
    log_every: int = Field(default=1000, ge=1)


class ScorerParams(BaseModel):
    """The aesthetic function: a fixed-shape MLP and its parameter vector."""

    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    net: NetSpec = SCORER_SPEC
    params: np.ndarray

    @model_validator(mode="after")
    def _check_params(self) -> "ScorerParams":
        validate_params(self.net, self.params)
        if self.net.n_in != VIEW_DIM or self.net.n_out != 1:
            raise ValueError(f"scorer must map {VIEW_DIM} features to one score")
        return self

    @classmethod
    def initialize(cls, seed: int) -> "ScorerParams":
        return cls(params=init_params(SCORER_SPEC, rng_for(seed, "scorer_init")))

    @classmethod
    def zeros(cls) -> "ScorerParams":
        return cls(params=np.zeros(SCORER_SPEC.param_count))


Scorer = Union[ScorerParams, ScoreFn]


class PreferencePair(BaseModel):
    """Two views of one scene, ordered by their true aesthetic value."""

    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    winner: ViewObservation
    loser: ViewObservation
    margin: float = Field(description="True-score gap, diagnostic only.")
    winner_pose: Pose
    loser_pose: Pose
    scene: SceneSpec

    @field_validator("margin")
    @classmethod
    def _winner_scores_higher(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("winner must have the strictly higher true score")
        return value


# ---------------------------------------------------------------------------
# Scoring and features
# ---------------------------------------------------------------------------
def _as_views(views: Union[ViewObservation, np.ndarray]) -> np.ndarray:
    if isinstance(views, ViewObservation):
        return views.as_vector()[None, :]
    array = np.asarray(views, dtype=np.float64)
    return array[None, :] if array.ndim == 1 else array


def score_views(scorer: Scorer, views: np.ndarray) -> np.ndarray:
    """Scores of a (B, 35) batch, for learned params or any batch callable."""
    batch = _as_views(views)
    if isinstance(scorer, ScorerParams):
        return forward(scorer.net, scorer.params, batch)[0][:, 0]
    return np.asarray(scorer(batch), dtype=np.float64).reshape(-1)


def score_fn(scorer: Scorer) -> ScoreFn:
    return lambda views: score_views(scorer, views)


def score(scorer: Scorer, view: Union[ViewObservation, np.ndarray]) -> float:
    return float(score_views(scorer, view)[0])


def feature_batch(scorer: ScorerParams, views: np.ndarray, mode: str = "multilayer") -> np.ndarray:
    """Hidden activations: all three layers (160) or the last one (32)."""
    _, _, tape = forward(scorer.net, scorer.params, _as_views(views))
    hidden = tape.activations[:-1]
    if mode == "last":
        return hidden[-1]
    return np.concatenate(hidden, axis=1)


def multilayer_features(scorer: ScorerParams, view: Union[ViewObservation, np.ndarray]) -> np.ndarray:
    return feature_batch(scorer, _as_views(view))[0]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------
def rank_loss(score_hi: float, score_lo: float) -> float:
    return max(0.0, score_lo - score_hi + 1.0)


def jitter_poses(
    scene: SceneSpec,
    xs: np.ndarray,
    ys: np.ndarray,
    thetas: np.ndarray,
    config: RobustnessConfig,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Minimal pose perturbation; translations that leave navigable space are dropped."""
    n = len(xs)
    direction = rng.uniform(-math.pi, math.pi, n)
    distance = rng.uniform(0.0, config.jitter_translation, n)
    rotation = np.radians(rng.uniform(-config.jitter_rotation_deg, config.jitter_rotation_deg, n))
    jx = xs + distance * np.cos(direction)
    jy = ys + distance * np.sin(direction)
    ok = navigable_mask(scene, jx, jy)
    return np.where(ok, jx, xs), np.where(ok, jy, ys), thetas + rotation


def _bad_exposures(config: RobustnessConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    return np.where(rng.random(n) < 0.5, config.over_exposure, config.under_exposure)


def robust_loss(
    scorer: Scorer,
    scene: SceneSpec,
    pose: Pose,
    view: ViewObservation,
    config: RobustnessConfig,
    rng: np.random.Generator,
) -> float:
    vector = view.as_vector()
    jx, jy, jt = jitter_poses(
        scene, np.array([pose.x]), np.array([pose.y]), np.array([pose.theta]), config, rng
    )
    jittered = render_views(scene, jx, jy, jt, vector[-1])
    exposed = expose(vector[None, :], _bad_exposures(config, rng, 1))
    phi, phi_jit, phi_bad = score_views(scorer, np.vstack([vector[None, :], jittered, exposed]))
    sim = 0.5 * (phi - phi_jit) ** 2
    expo = rank_loss(phi, phi_bad)
    return config.lambda_sim * sim + config.lambda_expo * expo


def total_loss(
    scorer: Scorer,
    pair: PreferencePair,
    config: RobustnessConfig,
    rng: np.random.Generator,
) -> float:
    phi_w, phi_l = score_views(scorer, np.vstack([pair.winner.as_vector(), pair.loser.as_vector()]))
    if rng.integers(2) == 0:
        view, pose = pair.winner, pair.winner_pose
    else:
        view, pose = pair.loser, pair.loser_pose
    robust = robust_loss(scorer, pair.scene, pose, view, config, rng)
    return config.lam * rank_loss(phi_w, phi_l) + (1.0 - config.lam) * robust


@dataclass(frozen=True)
class PairBatch:
    """Rendered training batch: both views, the robustness view and its copies."""

    winners: np.ndarray
    losers: np.ndarray
    selected_winner: np.ndarray
    jittered: np.ndarray
    exposed: np.ndarray

    def __len__(self) -> int:
        return int(self.winners.shape[0])


def batch_loss_and_grad(
    params: np.ndarray, batch: PairBatch, config: RobustnessConfig
) -> Tuple[float, np.ndarray, Dict[str, float]]:
    """Mean total loss over a batch and its gradient w.r.t. the scorer params."""
    n = len(batch)
    stacked = np.vstack([batch.winners, batch.losers, batch.jittered, batch.exposed])
    out, _, tape = forward(SCORER_SPEC, params, stacked)
    phi_w, phi_l, phi_j, phi_e = np.split(out[:, 0], 4)
    sel = batch.selected_winner
    phi_s = np.where(sel, phi_w, phi_l)

    rank_margin = phi_l - phi_w + 1.0
    expo_margin = phi_e - phi_s + 1.0
    rank_active = rank_margin > 0
    expo_active = expo_margin > 0
    rank = np.where(rank_active, rank_margin, 0.0)
    sim = 0.5 * (phi_s - phi_j) ** 2
    expo = np.where(expo_active, expo_margin, 0.0)
    robust = config.lambda_sim * sim + config.lambda_expo * expo
    loss = float(np.mean(config.lam * rank + (1.0 - config.lam) * robust))

    w_rob = (1.0 - config.lam) / n
    d_rank = config.lam * rank_active / n
    d_s = w_rob * (config.lambda_sim * (phi_s - phi_j) - config.lambda_expo * expo_active)
    d_w = -d_rank + np.where(sel, d_s, 0.0)
    d_l = d_rank + np.where(sel, 0.0, d_s)
    d_j = -w_rob * config.lambda_sim * (phi_s - phi_j)
    d_e = w_rob * config.lambda_expo * expo_active
    grads = backward(tape, np.concatenate([d_w, d_l, d_j, d_e])[:, None])[0]
    parts = {
        "rank": float(rank.mean()),
        "sim": float(sim.mean()),
        "expo": float(expo.mean()),
    }
    return loss, grads, parts


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ViewPool:
    """Sampled views of one scene with their true scores."""

    scene: SceneSpec
    xs: np.ndarray
    ys: np.ndarray
    thetas: np.ndarray
    views: np.ndarray
    truth: np.ndarray

    @classmethod
    def draw(cls, scene: SceneSpec, n: int, seed: int) -> "ViewPool":
        xs, ys, thetas, views = sample_view_arrays(scene, n, seed)
        return cls(scene, xs, ys, thetas, views, true_aesthetic_batch(scene, xs, ys, thetas))


def draw_pair_indices(
    truth: np.ndarray, n: int, min_gap: float, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """(winner, loser) pool indices for ``n`` pairs with true gap >= min_gap."""
    winners: List[np.ndarray] = []
    losers: List[np.ndarray] = []
    have = 0
    for _ in range(1000):
        if have >= n:
            break
        i, j = rng.integers(len(truth), size=(2, 2 * (n - have) + 8))
        keep = np.abs(truth[i] - truth[j]) >= max(min_gap, 1e-12)
        i, j = i[keep], j[keep]
        hi = np.where(truth[i] > truth[j], i, j)
        lo = np.where(truth[i] > truth[j], j, i)
        winners.append(hi)
        losers.append(lo)
        have += len(hi)
    if have < n:
        raise SceneError(f"could not find {n} pairs with true gap >= {min_gap}; the aesthetic field is too flat")
    return np.concatenate(winners)[:n], np.concatenate(losers)[:n]


def draw_pair_batch(
    pool: ViewPool,
    n: int,
    min_gap: float,
    config: RobustnessConfig,
    rng: np.random.Generator,
) -> PairBatch:
    win, lose = draw_pair_indices(pool.truth, n, min_gap, rng)
    selected_winner = rng.random(n) < 0.5
    chosen = np.where(selected_winner, win, lose)
    jx, jy, jt = jitter_poses(
        pool.scene, pool.xs[chosen], pool.ys[chosen], pool.thetas[chosen], config, rng
    )
    return PairBatch(
        winners=pool.views[win],
        losers=pool.views[lose],
        selected_winner=selected_winner,
        jittered=render_views(pool.scene, jx, jy, jt),
        exposed=expose(pool.views[chosen], _bad_exposures(config, rng, n)),
    )


def train_scorer(
    scenes: Sequence[SceneSpec],
    iters: Optional[int] = None,
    batch_size: Optional[int] = None,
    seed: int = 0,
    robustness: Optional[RobustnessConfig] = None,
    train_config: Optional[ScorerTrainConfig] = None,
) -> Tuple[ScorerParams, pd.DataFrame]:
    """Adam on the combined loss; one scene per iteration, fresh pairs each time."""
    if not scenes:
        raise ValueError("train_scorer needs at least one scene")
    robustness = robustness or RobustnessConfig()
    cfg = train_config or ScorerTrainConfig()
    iters = cfg.iters if iters is None else iters
    batch_size = cfg.batch_size if batch_size is None else batch_size

    pools = [ViewPool.draw(s, cfg.pool_size, derive_seed(seed, "scorer_pool", s.scene_id)) for s in scenes]
    rng = rng_for(seed, "train_scorer")
    params = ScorerParams.initialize(seed).params
    adam = adam_init(params.size)
    logger.info(
        "training scorer on %d scenes: %d iterations, batch %d, config %s",
        len(scenes),
        iters,
        batch_size,
        robustness.model_dump_json(by_alias=True),
    )

    rows: List[Dict[str, Any]] = []
    running: List[float] = []
    for it in range(iters):
        pool = pools[int(rng.integers(len(pools)))]
        batch = draw_pair_batch(pool, batch_size, cfg.ambiguous_gap, robustness, rng)
        loss, grads, parts = batch_loss_and_grad(params, batch, robustness)
        params, adam = adam_step(params, grads, adam, cfg.lr)
        running.append(loss)
        if (it + 1) % cfg.log_every == 0 or it == iters - 1:
            row = {"iteration": it + 1, "loss": float(np.mean(running)), **parts}
            rows.append(row)
            running.clear()
            logger.info("scorer iter %d: loss %.4f", it + 1, row["loss"])
    log = pd.DataFrame(rows, columns=["iteration", "loss", "rank", "sim", "expo"])
    return ScorerParams(params=params), log


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------
class ScorerReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scene_set: str
    pair_accuracy: float
    exposure_accuracy: float
    jitter_mse: float
    n_pairs: int
    n_views: int

    def to_csv(self, run_config: Optional[Dict[str, Any]] = None) -> str:
        frame = pd.DataFrame(
            [[self.scene_set, self.pair_accuracy, self.exposure_accuracy, self.jitter_mse]],
            columns=["scene_set", "pair_accuracy", "exposure_accuracy", "jitter_mse"],
        )
        return csv_preamble(run_config) + frame.to_csv(index=False, float_format="%.6f")


def _ordered_fraction(better: np.ndarray, worse: np.ndarray) -> Tuple[float, int]:
    """Wins plus half the ties, as an exact (numerator, count) pair."""
    wins = int(np.sum(better > worse))
    ties = int(np.sum(better == worse))
    return wins + 0.5 * ties, int(better.size)


def eval_scorer(
    scorer: Scorer,
    scenes: Sequence[SceneSpec],
    seed: int = 0,
    robustness: Optional[RobustnessConfig] = None,
    pairs_per_scene: int = 500,
    views_per_scene: int = 500,
    min_gap: float = 0.2,
    scene_set: str = "heldout",
) -> ScorerReport:
    """Pair ranking, exposure ranking and jitter MSE on held-out scenes."""
    robustness = robustness or RobustnessConfig()
    pair_hits = exposure_hits = 0.0
    pair_total = exposure_total = 0
    squared: List[float] = []
    for scene in scenes:
        rng = rng_for(seed, "eval_scorer", scene.scene_id)
        n_pool = max(2 * pairs_per_scene, views_per_scene)
        pool = ViewPool.draw(scene, n_pool, derive_seed(seed, "eval_pool", scene.scene_id))
        win, lose = draw_pair_indices(pool.truth, pairs_per_scene, min_gap, rng)
        hits, count = _ordered_fraction(
            score_views(scorer, pool.views[win]), score_views(scorer, pool.views[lose])
        )
        pair_hits += hits
        pair_total += count

        views = pool.views[:views_per_scene]
        base = score_views(scorer, views)
        for factor in (robustness.over_exposure, robustness.under_exposure):
            hits, count = _ordered_fraction(base, score_views(scorer, expose(views, factor)))
            exposure_hits += hits
            exposure_total += count

        jx, jy, jt = jitter_poses(
            scene,
            pool.xs[:views_per_scene],
            pool.ys[:views_per_scene],
            pool.thetas[:views_per_scene],
            robustness,
            rng,
        )
        jittered = score_views(scorer, render_views(scene, jx, jy, jt))
        squared.extend(((base - jittered) ** 2).tolist())

    report = ScorerReport(
        scene_set=scene_set,
        pair_accuracy=pair_hits / max(pair_total, 1),
        exposure_accuracy=exposure_hits / max(exposure_total, 1),
        jitter_mse=math.fsum(squared) / max(len(squared), 1),
        n_pairs=pair_total,
        n_views=len(squared),
    )
    logger.info(
        "scorer on %s: pair %.3f, exposure %.3f, jitter mse %.4f",
        scene_set,
        report.pair_accuracy,
        report.exposure_accuracy,
        report.jitter_mse,
    )
    return report


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
def save_scorer(
    path: Union[str, Path], scorer: ScorerParams, extra: Optional[Dict[str, Any]] = None
) -> None:
    save_checkpoint(path, {"scorer": scorer.net}, scorer.params, extra)


def load_scorer(path: Union[str, Path]) -> ScorerParams:
    checkpoint = load_checkpoint(path)
    if list(checkpoint.nets) != ["scorer"]:
        raise FormatError(f"{path}: not a scorer checkpoint (nets {sorted(checkpoint.nets)})")
    return ScorerParams(net=checkpoint.nets["scorer"], params=checkpoint.params)
