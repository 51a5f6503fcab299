"""End-to-end runs at desk scale.

These train the scorer and the agent from scratch and take tens of minutes;
select them with ``pytest -m slow tests/integration_tests``.
"""

from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd
import pytest

from autophoto._utilities import derive_seed, rng_for
from autophoto.aesthetics import ScorerTrainConfig, eval_scorer, load_scorer, train_scorer
from autophoto.baselines import (
    ImitationConfig,
    generate_demonstrations,
    greedy_policy,
    imitation_train,
    keyframe_policy,
)
from autophoto.cli import main
from autophoto.harness import ablation_suite
from autophoto.pomdp import Action, CaptureEnv, EpisodeConfig, ScoredSamples
from autophoto.scene import SceneSpec, generate_scene, load_scenes
from tests.unit_tests.conftest import view_scorer

SEED = 17


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory: pytest.TempPathFactory) -> Dict[str, Path]:
    """gen-scenes, train-scorer and train-agent through the command line."""
    root = tmp_path_factory.mktemp("pipeline")
    paths = {
        "train": root / "train",
        "heldout": root / "heldout",
        "scorer": root / "scorer.ckpt",
        "agent": root / "agent.ckpt",
    }
    seed = str(SEED)
    assert main(["gen-scenes", "--count", "8", "--seed", seed, "--out", str(paths["train"])]) == 0
    assert main(["gen-scenes", "--count", "4", "--seed", str(SEED + 1), "--out", str(paths["heldout"])]) == 0
    assert main(["train-scorer", "--scenes", str(paths["train"]), "--seed", seed, "--out", str(paths["scorer"])]) == 0
    code = main(
        [
            "train-agent",
            "--scenes",
            str(paths["train"]),
            "--scorer",
            str(paths["scorer"]),
            "--seed",
            seed,
            "--out",
            str(paths["agent"]),
        ]
    )
    assert code == 0
    return paths


@pytest.mark.slow
def test_trained_scorer_quality(pipeline: Dict[str, Path]) -> None:
    scorer = load_scorer(pipeline["scorer"])
    report = eval_scorer(scorer, load_scenes(pipeline["heldout"]), seed=SEED)
    assert report.pair_accuracy >= 0.90
    assert report.exposure_accuracy >= 0.95
    assert report.jitter_mse <= 0.05


@pytest.mark.slow
def test_agent_beats_the_baselines(pipeline: Dict[str, Path]) -> None:
    out = pipeline["train"].parent / "eval.csv"
    code = main(
        [
            "eval",
            "--scenes",
            str(pipeline["heldout"]),
            "--train-scenes",
            str(pipeline["train"]),
            "--scorer",
            str(pipeline["scorer"]),
            "--policy",
            "random",
            "greedy",
            "keyframe",
            "rl",
            "--agent",
            str(pipeline["agent"]),
            "--seed",
            str(SEED),
            "--out",
            str(out),
        ]
    )
    assert code == 0
    accuracy = pd.read_csv(out, comment="#").set_index("policy")["accuracy"]
    assert accuracy["rl"] >= accuracy["random"] + 0.30
    assert accuracy["rl"] >= accuracy["greedy"]
    assert accuracy["rl"] >= accuracy["keyframe"]
    assert accuracy["keyframe"] >= accuracy["random"] + 0.20


@pytest.mark.slow
def test_reward_terms_and_memory_matter(pipeline: Dict[str, Path]) -> None:
    table = ablation_suite(
        load_scenes(pipeline["train"]),
        load_scenes(pipeline["heldout"]),
        load_scorer(pipeline["scorer"]),
        seed=SEED,
        variants=["full", "no_reward_terms", "no_lstm"],
    ).set_index("variant")
    assert table.loc["full", "accuracy"] >= table.loc["no_reward_terms", "accuracy"] + 0.05
    assert table.loc["full", "accuracy"] >= table.loc["no_lstm", "accuracy"] + 0.05


@pytest.mark.slow
def test_cloned_policy_matches_held_out_demonstrations(pipeline: Dict[str, Path]) -> None:
    scorer = load_scorer(pipeline["scorer"])
    episode = EpisodeConfig(n_samples=500, knn=50)
    demos = generate_demonstrations(load_scenes(pipeline["train"]), scorer, count=400, seed=SEED, episode=episode)
    config = ImitationConfig(epochs=50, lr=1e-3, val_fraction=0.2)
    _, report = imitation_train(demos, scorer, config, seed=SEED)
    assert report.n_val == 80
    assert report.val_accuracy is not None
    assert report.val_accuracy >= 0.8


# ---------------------------------------------------------------------------
# Baseline contracts over many episodes
# ---------------------------------------------------------------------------
@pytest.fixture(scope="module")
def contract_scenes() -> List[SceneSpec]:
    return [generate_scene(derive_seed(SEED, "contract", i)) for i in range(4)]


def contract_envs(scenes: List[SceneSpec]) -> List[CaptureEnv]:
    episode = EpisodeConfig(n_samples=500, knn=50)
    cache: Dict[int, ScoredSamples] = {}
    envs = []
    for i in range(200):
        env = CaptureEnv(
            scenes[i % len(scenes)], view_scorer(), episode, evaluation=True, samples_cache=cache
        )
        env.reset(seed=derive_seed(SEED, "contract_episode", i))
        envs.append(env)
    return envs


@pytest.mark.slow
def test_greedy_contract(contract_scenes: List[SceneSpec]) -> None:
    for env in contract_envs(contract_scenes):
        transcript = greedy_policy(env)
        committed = [transcript.start_phi] + [s.phi for s in transcript.steps if s.action is not Action.CAPTURE]
        assert np.all(np.diff(committed) > 0.0)
        assert transcript.n_probes + transcript.length - 1 <= 16


@pytest.mark.slow
def test_keyframe_contract(contract_scenes: List[SceneSpec]) -> None:
    for i, env in enumerate(contract_envs(contract_scenes)):
        transcript = keyframe_policy(env, rng=rng_for(SEED, "keyframe", i))
        assert transcript.final_phi == max(transcript.phis())
        assert transcript.length - 1 <= 16


@pytest.mark.slow
def test_scorer_from_scratch_is_deterministic(contract_scenes: List[SceneSpec]) -> None:
    config = ScorerTrainConfig(pool_size=500, log_every=50)
    a, _ = train_scorer(contract_scenes[:2], iters=200, seed=SEED, train_config=config)
    b, _ = train_scorer(contract_scenes[:2], iters=200, seed=SEED, train_config=config)
    assert a.params.tobytes() == b.params.tobytes()
