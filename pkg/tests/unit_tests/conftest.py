from typing import Callable

import numpy as np
import pytest
from pytest_socket import disable_socket

from autophoto.pomdp import EpisodeConfig
from autophoto.scene import BRIGHTNESS, DEPTH_SLICE, HOTSPOT_SLICE, SceneParams, SceneSpec, generate_scene


def pytest_runtest_setup() -> None:
    disable_socket()


SMALL_SCENE = SceneParams(width=20, height=20, n_hotspots=3, n_salient=2, room_splits=1)


@pytest.fixture(scope="session")
def scene() -> SceneSpec:
    return generate_scene(7, SMALL_SCENE)


@pytest.fixture(scope="session")
def other_scene() -> SceneSpec:
    return generate_scene(8, SMALL_SCENE)


def view_scorer(wall_penalty: float = 0.5) -> Callable[[np.ndarray], np.ndarray]:
    """Visible hotspot intensity minus the wall term.

    Matches the true field whenever every kernel in reach has its centre in view.
    """

    def scorer(views: np.ndarray) -> np.ndarray:
        depth = views[:, DEPTH_SLICE].mean(axis=1)
        return views[:, HOTSPOT_SLICE].sum(axis=1) - wall_penalty * (1.0 - depth)

    return scorer


def exposure_aware_scorer(wall_penalty: float = 0.5) -> Callable[[np.ndarray], np.ndarray]:
    base = view_scorer(wall_penalty)

    def scorer(views: np.ndarray) -> np.ndarray:
        return base(views) - np.abs(np.log(views[:, BRIGHTNESS]))

    return scorer


@pytest.fixture
def field_scorer() -> Callable[[np.ndarray], np.ndarray]:
    return view_scorer()


@pytest.fixture
def small_episode() -> EpisodeConfig:
    return EpisodeConfig(n_samples=200, knn=20, max_steps=12)
