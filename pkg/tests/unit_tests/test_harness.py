import math
import xml.etree.ElementTree as ET
from typing import Callable, Dict

import numpy as np
import pytest

from autophoto._utilities import ConfigError, EpisodeError, SceneOverlapError, rng_for
from autophoto.aesthetics import ScorerParams
from autophoto.baselines import random_policy
from autophoto.harness import (
    ABLATION_COLUMNS,
    REPORT_COLUMNS,
    EpisodeResult,
    EpisodeRunner,
    EvalConfig,
    ablation_suite,
    ablation_variants,
    binomial_stderr,
    check_disjoint,
    evaluate,
    field_map,
    make_runner,
    path_vertices,
    render_trajectory,
    summarize,
)
from autophoto.pomdp import Action, CaptureEnv, EpisodeConfig
from autophoto.policy import PolicyConfig, PolicyParams, PPOConfig
from autophoto.scene import SceneSpec, true_aesthetic_batch

SMALL_POLICY = PolicyConfig(hidden=8, feature_mode="last")


def baseline_runners(*names: str) -> Dict[str, EpisodeRunner]:
    return {name: make_runner(name) for name in names}


def episode_result(success: bool, scene_id: int = 1, length: int = 3, phi: float = 0.5) -> EpisodeResult:
    return EpisodeResult(
        policy="p",
        scene_id=scene_id,
        episode=0,
        start_x=1.0,
        start_y=1.0,
        start_theta=0.0,
        tau=0.4,
        final_phi=phi,
        success=success,
        length=length,
    )


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------
def test_binomial_stderr() -> None:
    assert binomial_stderr(0.5, 100) == pytest.approx(0.05)
    assert binomial_stderr(0.0, 10) == 0.0
    assert binomial_stderr(1.0, 10) == 0.0
    assert binomial_stderr(0.3, 0) == 0.0


def test_summarize() -> None:
    results = [episode_result(True, 1, 2, 1.0), episode_result(False, 2, 4, 0.0), episode_result(True, 2, 3, 0.5)]
    summary = summarize("p", results)
    assert summary.accuracy == pytest.approx(2 / 3)
    assert summary.stderr == pytest.approx(math.sqrt(2 / 3 * 1 / 3 / 3))
    assert (summary.scenes, summary.episodes) == (2, 3)
    assert summary.mean_len == pytest.approx(3.0)
    assert summary.mean_phi == pytest.approx(0.5)


def test_check_disjoint(scene: SceneSpec, other_scene: SceneSpec) -> None:
    check_disjoint(None, [scene])
    check_disjoint(set(), [scene])
    check_disjoint({other_scene.scene_id}, [scene])
    with pytest.raises(SceneOverlapError):
        check_disjoint({scene.scene_id, 12345}, [scene, other_scene])


def test_make_runner_rejects_bad_requests() -> None:
    with pytest.raises(ValueError):
        make_runner("oracle")
    with pytest.raises(ValueError):
        make_runner("rl")


# ---------------------------------------------------------------------------
# Paired evaluation
# ---------------------------------------------------------------------------
def test_policies_see_identical_episodes(
    scene: SceneSpec, other_scene: SceneSpec, field_scorer: Callable, small_episode: EpisodeConfig
) -> None:
    report = evaluate(
        baseline_runners("random", "thirds", "greedy", "keyframe"),
        [scene, other_scene],
        field_scorer,
        seed=5,
        config=EvalConfig(episodes_per_scene=3),
        episode=small_episode,
    )
    starts: Dict[tuple, set] = {}
    for r in report.episodes:
        starts.setdefault((r.scene_id, r.episode), set()).add((r.start_x, r.start_y, r.start_theta, r.tau))
    assert len(starts) == 6
    assert all(len(s) == 1 for s in starts.values())
    assert [r.policy for r in report.results] == ["random", "thirds", "greedy", "keyframe"]
    assert all(r.episodes == 6 and r.scenes == 2 for r in report.results)
    with pytest.raises(KeyError):
        report.result("rl")


def test_reports_do_not_depend_on_policy_order_or_jobs(
    scene: SceneSpec, field_scorer: Callable, small_episode: EpisodeConfig
) -> None:
    config = EvalConfig(episodes_per_scene=4)
    forward = evaluate(baseline_runners("random", "greedy"), [scene], field_scorer, 2, config, small_episode)
    backward = evaluate(baseline_runners("greedy", "random"), [scene], field_scorer, 2, config, small_episode)
    threaded = evaluate(
        baseline_runners("random", "greedy"),
        [scene],
        field_scorer,
        2,
        config.model_copy(update={"jobs": 3}),
        small_episode,
    )
    for name in ("random", "greedy"):
        assert forward.result(name) == backward.result(name)
    assert forward.to_csv({"seed": 2}) == threaded.to_csv({"seed": 2})
    assert forward.episodes == threaded.episodes


def test_reports_do_not_depend_on_the_frozen_step_counter(
    scene: SceneSpec, field_scorer: Callable, small_episode: EpisodeConfig
) -> None:
    fresh = EvalConfig(episodes_per_scene=3)
    assert fresh.zeta == 0
    late = fresh.model_copy(update={"zeta": 10**6})
    a = evaluate(baseline_runners("random", "keyframe"), [scene], field_scorer, 4, fresh, small_episode)
    b = evaluate(baseline_runners("random", "keyframe"), [scene], field_scorer, 4, late, small_episode)
    assert a.results == b.results
    assert a.episodes == b.episodes


def test_report_csv_is_byte_stable(
    scene: SceneSpec, field_scorer: Callable, small_episode: EpisodeConfig
) -> None:
    def run() -> str:
        report = evaluate(
            baseline_runners("random"), [scene], field_scorer, 9, EvalConfig(episodes_per_scene=2), small_episode
        )
        return report.to_csv({"seed": 9})

    text = run()
    assert text == run()
    rows = [line for line in text.splitlines() if not line.startswith("#")]
    assert rows[0] == ",".join(REPORT_COLUMNS)
    assert rows[1].startswith("random,1,2,")
    assert '# eval {"episodes_per_scene":2' in text


def test_evaluation_rejects_training_scenes(scene: SceneSpec, field_scorer: Callable) -> None:
    with pytest.raises(SceneOverlapError):
        evaluate(baseline_runners("random"), [scene], field_scorer, train_scene_ids={scene.scene_id})


def test_learned_policy_runner(scene: SceneSpec, small_episode: EpisodeConfig) -> None:
    scorer = ScorerParams.initialize(0)
    agent = PolicyParams.initialize(SMALL_POLICY, seed=0)
    report = evaluate(
        {"rl": make_runner("rl", scorer, agent)},
        [scene],
        scorer,
        seed=1,
        config=EvalConfig(episodes_per_scene=2),
        episode=small_episode,
    )
    result = report.result("rl")
    assert result.episodes == 2
    assert 1.0 <= result.mean_len <= small_episode.max_steps + 1


def test_summary_mentions_every_policy(
    scene: SceneSpec, field_scorer: Callable, small_episode: EpisodeConfig
) -> None:
    report = evaluate(
        baseline_runners("random", "thirds"), [scene], field_scorer, 0, EvalConfig(episodes_per_scene=1), small_episode
    )
    summary = report.summary()
    assert "random" in summary and "thirds" in summary
    assert summary.splitlines()[0].startswith("heldout: 1 scenes x 1 episodes")


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------
def test_ablation_variants() -> None:
    variants = ablation_variants()
    assert list(variants) == [
        "full",
        "no_score_diff",
        "no_exploration",
        "no_reward_terms",
        "no_lstm",
        "last_layer_features",
        "no_10_90_turns",
    ]
    assert not variants["no_score_diff"][0].score_diff_term
    assert variants["no_score_diff"][0].explore_term
    assert not variants["no_reward_terms"][0].explore_term
    assert not variants["no_lstm"][1].recurrent
    assert variants["last_layer_features"][1].feature_mode == "last"
    turns = variants["no_10_90_turns"][0].action_set
    assert len(turns) == 5
    assert Action.TURN_L10 not in turns and Action.TURN_R90 not in turns


def test_ablation_suite_runs_selected_variants(
    scene: SceneSpec, other_scene: SceneSpec, small_episode: EpisodeConfig
) -> None:
    table = ablation_suite(
        [scene],
        [other_scene],
        ScorerParams.initialize(0),
        seed=0,
        ppo=PPOConfig(n_envs=1, horizon=4, total_steps=4, epochs=1, minibatch=4),
        episode=small_episode,
        policy_config=SMALL_POLICY,
        config=EvalConfig(episodes_per_scene=1),
        variants=["full", "no_10_90_turns"],
    )
    assert list(table.columns) == ABLATION_COLUMNS
    assert list(table["variant"]) == ["full", "no_10_90_turns"]
    assert list(table["n_actions"]) == [9, 5]


def test_ablation_suite_rejects_bad_input(scene: SceneSpec, other_scene: SceneSpec) -> None:
    scorer = ScorerParams.zeros()
    with pytest.raises(ConfigError):
        ablation_suite([scene], [other_scene], scorer, variants=["no_such_variant"])
    with pytest.raises(SceneOverlapError):
        ablation_suite([scene], [scene], scorer)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------
def played_env(scene: SceneSpec, scorer: Callable, episode: EpisodeConfig, seed: int = 0) -> CaptureEnv:
    env = CaptureEnv(scene, scorer, episode, evaluation=True)
    env.reset(seed=seed)
    return env


def test_field_map(scene: SceneSpec) -> None:
    heat = field_map(scene)
    assert heat.shape == scene.grid.shape
    assert np.all(np.isnan(heat[scene.grid]))
    assert np.all(np.isfinite(heat[~scene.grid]))
    row, col = scene.free_cells[0]
    x, y = (col + 0.5) * scene.cell_size, (row + 0.5) * scene.cell_size
    slices = [true_aesthetic_batch(scene, x, y, h)[0] for h in (0.0, 0.5 * math.pi, -math.pi, -0.5 * math.pi)]
    assert heat[row, col] == pytest.approx(max(slices))


def test_immediate_capture_renders_a_single_vertex(
    scene: SceneSpec, field_scorer: Callable, small_episode: EpisodeConfig
) -> None:
    env = played_env(scene, field_scorer, small_episode)
    env.step_action(Action.CAPTURE)
    svg, vertices = render_trajectory(scene, env.transcript)
    assert vertices.shape == (1, 2)
    assert ET.fromstring(svg).tag.endswith("svg")


def test_path_has_one_vertex_per_movement(
    scene: SceneSpec, field_scorer: Callable, small_episode: EpisodeConfig
) -> None:
    for seed in range(3):
        env = played_env(scene, field_scorer, small_episode, seed)
        transcript = random_policy(env, rng_for(seed, "random"))
        movements = sum(s.action is not Action.CAPTURE for s in transcript.steps)
        svg, vertices = render_trajectory(scene, transcript)
        assert len(vertices) == movements + 1
        np.testing.assert_array_equal(vertices, path_vertices(transcript))
        assert ET.fromstring(svg).tag.endswith("svg")


def test_render_is_deterministic_and_shows_the_learned_field(
    scene: SceneSpec, field_scorer: Callable, small_episode: EpisodeConfig
) -> None:
    env = played_env(scene, field_scorer, small_episode)
    transcript = random_policy(env, rng_for(0, "random"))
    first, _ = render_trajectory(scene, transcript, field_scorer)
    second, _ = render_trajectory(scene, transcript, field_scorer)
    assert first == second
    assert "learned score" in first
    assert "learned score" not in render_trajectory(scene, transcript)[0]


def test_render_rejects_another_scene(
    scene: SceneSpec, other_scene: SceneSpec, field_scorer: Callable, small_episode: EpisodeConfig
) -> None:
    env = played_env(scene, field_scorer, small_episode)
    env.step_action(Action.CAPTURE)
    with pytest.raises(EpisodeError):
        render_trajectory(other_scene, env.transcript)
