from importlib import metadata
from typing import List

from autophoto.aesthetics import RobustnessConfig, ScorerParams, eval_scorer, train_scorer
from autophoto.baselines import (
    BaselineBudget,
    generate_demonstrations,
    greedy_policy,
    imitation_train,
    keyframe_policy,
    random_policy,
    rule_of_thirds_policy,
)
from autophoto.harness import EvalConfig, ablation_suite, evaluate, render_trajectory
from autophoto.pomdp import Action, CaptureEnv, EpisodeConfig, EpisodeTranscript
from autophoto.policy import PolicyConfig, PolicyParams, PPOConfig, train
from autophoto.scene import Pose, SceneParams, SceneSpec, generate_scene, render_view

try:
    __version__: str = metadata.version("autophoto-lab")
except metadata.PackageNotFoundError:
    # Case where package metadata is not available.
    __version__ = ""
del metadata  # optional, avoids polluting the results of dir(__package__)

__all__: List[str] = [
    "Action",
    "BaselineBudget",
    "CaptureEnv",
    "EpisodeConfig",
    "EpisodeTranscript",
    "EvalConfig",
    "PPOConfig",
    "PolicyConfig",
    "PolicyParams",
    "Pose",
    "RobustnessConfig",
    "SceneParams",
    "SceneSpec",
    "ScorerParams",
    "ablation_suite",
    "eval_scorer",
    "evaluate",
    "generate_demonstrations",
    "generate_scene",
    "greedy_policy",
    "imitation_train",
    "keyframe_policy",
    "random_policy",
    "render_trajectory",
    "render_view",
    "rule_of_thirds_policy",
    "train",
    "train_scorer",
    "__version__",
]
