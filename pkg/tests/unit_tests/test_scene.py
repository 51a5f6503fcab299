import json
import math
from pathlib import Path

import numpy as np
import pytest

from autophoto._utilities import FormatError, SceneError, rng_for
from autophoto.scene import (
    AestheticKernel,
    Pose,
    SalientObject,
    SceneParams,
    SceneSpec,
    cast_rays,
    generate_scene,
    is_navigable,
    load_scene,
    load_scenes,
    render_view,
    render_views,
    salient_projection,
    sample_pose_arrays,
    sample_views,
    save_scene,
    scene_to_json,
    true_aesthetic,
    true_aesthetic_batch,
)


def walled_grid(n: int = 20) -> np.ndarray:
    grid = np.zeros((n, n), dtype=bool)
    grid[0, :] = grid[-1, :] = grid[:, 0] = grid[:, -1] = True
    return grid


def single_kernel_scene(wall_penalty: float = 0.0, **kernel: float) -> SceneSpec:
    spec = {"preferred_heading": 0.0, "spatial_sigma": 1.0, "angular_sigma": 0.5, "weight": 2.0}
    spec.update(kernel)
    return SceneSpec(
        grid=walled_grid(),
        hotspots=(AestheticKernel(center=(2.5, 2.5), **spec),),
        scene_id=1,
        rng_seed=1,
        wall_penalty=wall_penalty,
    )


def test_generate_scene_is_deterministic() -> None:
    assert scene_to_json(generate_scene(7)) == scene_to_json(generate_scene(7))


def test_different_seeds_give_different_scenes() -> None:
    assert scene_to_json(generate_scene(7)) != scene_to_json(generate_scene(8))


@pytest.mark.parametrize(
    "params",
    [SceneParams(n_hotspots=0), SceneParams(width=12), SceneParams(height=15)],
)
def test_degenerate_params_are_rejected(params: SceneParams) -> None:
    with pytest.raises(SceneError):
        generate_scene(1, params)


@pytest.mark.parametrize("style", ["rooms", "open"])
def test_generated_scene_invariants(style: str) -> None:
    scene = generate_scene(3, SceneParams(style=style))
    grid = scene.grid
    assert grid[0, :].all() and grid[-1, :].all() and grid[:, 0].all() and grid[:, -1].all()
    assert (~grid).any()
    for kernel in scene.hotspots:
        assert is_navigable(scene, *kernel.center)
        assert -math.pi <= kernel.preferred_heading < math.pi
    assert scene.style == style


def test_scene_file_round_trip(tmp_path: Path, scene: SceneSpec) -> None:
    path = tmp_path / "scene.json"
    save_scene(path, scene, {"note": "fixture"})
    loaded = load_scene(path)
    assert scene_to_json(loaded) == scene_to_json(scene)
    payload = json.loads(path.read_text())
    assert payload["format"] == "autophoto-scene/1"
    assert payload["meta"] == {"note": "fixture"}


def test_load_scenes_orders_by_file_name(tmp_path: Path) -> None:
    for name, seed in (("b.json", 2), ("a.json", 1)):
        save_scene(tmp_path / name, generate_scene(seed))
    assert [s.scene_id for s in load_scenes(tmp_path)] == [1, 2]


def test_load_scene_rejects_other_formats(tmp_path: Path) -> None:
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(FormatError):
        load_scene(path)
    path.write_text("{not json")
    with pytest.raises(FormatError):
        load_scene(path)


def test_true_aesthetic_at_kernel_center() -> None:
    scene = single_kernel_scene()
    assert true_aesthetic(scene, Pose(x=2.5, y=2.5, theta=0.0)) == pytest.approx(2.0, abs=1e-12)


def test_true_aesthetic_one_angular_sigma_off() -> None:
    scene = single_kernel_scene()
    value = true_aesthetic(scene, Pose(x=2.5, y=2.5, theta=0.5))
    assert value == pytest.approx(2.0 * math.exp(-0.5), abs=1e-12)


def test_true_aesthetic_matches_scalar_formula(scene: SceneSpec) -> None:
    xs, ys, thetas = sample_pose_arrays(scene, 25, rng_for(0, "test"))
    for x, y, theta in zip(xs, ys, thetas):
        pose = Pose(x=float(x), y=float(y), theta=float(theta))
        expected = 0.0
        for k in scene.hotspots:
            d2 = (pose.x - k.center[0]) ** 2 + (pose.y - k.center[1]) ** 2
            dtheta = math.remainder(pose.theta - k.preferred_heading, 2.0 * math.pi)
            expected += (
                k.weight
                * math.exp(-d2 / (2.0 * k.spatial_sigma**2))
                * math.exp(-(dtheta**2) / (2.0 * k.angular_sigma**2))
            )
        depth = render_view(scene, pose).depth_rays
        expected -= scene.wall_penalty * (1.0 - float(np.mean(depth)))
        assert true_aesthetic(scene, pose) == pytest.approx(expected, abs=1e-9)


def test_true_aesthetic_ignores_brightness(scene: SceneSpec) -> None:
    pose = Pose(x=float(scene.hotspots[0].center[0]), y=float(scene.hotspots[0].center[1]), theta=0.3)
    bright = render_view(scene, pose, 4.0)
    dim = render_view(scene, pose, 1.0)
    assert true_aesthetic(scene, pose) == true_aesthetic_batch(scene, pose.x, pose.y, pose.theta)[0]
    np.testing.assert_array_equal(bright.depth_rays, dim.depth_rays)
    np.testing.assert_array_equal(bright.hotspot_intensity, dim.hotspot_intensity)
    assert bright.salient_x == dim.salient_x
    assert (bright.brightness, dim.brightness) == (4.0, 1.0)


def test_true_aesthetic_is_invariant_to_quarter_turns(scene: SceneSpec) -> None:
    n = scene.width
    assert scene.height == n
    side = n * scene.cell_size
    rotated = SceneSpec(
        grid=scene.grid[::-1, :].T,
        hotspots=tuple(
            AestheticKernel(
                center=(side - k.center[1], k.center[0]),
                preferred_heading=k.preferred_heading + math.pi / 2,
                spatial_sigma=k.spatial_sigma,
                angular_sigma=k.angular_sigma,
                weight=k.weight,
            )
            for k in scene.hotspots
        ),
        scene_id=scene.scene_id,
        rng_seed=scene.rng_seed,
        wall_penalty=scene.wall_penalty,
    )
    xs, ys, thetas = sample_pose_arrays(scene, 50, rng_for(1, "rotation"))
    original = true_aesthetic_batch(scene, xs, ys, thetas)
    turned = true_aesthetic_batch(rotated, side - ys, xs, thetas + math.pi / 2)
    np.testing.assert_allclose(turned, original, atol=1e-9)


def test_query_off_navigable_space_is_rejected(scene: SceneSpec) -> None:
    with pytest.raises(SceneError):
        true_aesthetic(scene, Pose(x=0.1, y=0.1, theta=0.0))


def test_depth_facing_a_wall() -> None:
    scene = single_kernel_scene()
    distance = cast_rays(scene, np.array([4.5]), np.array([2.6]), np.array([0.0]))
    assert distance[0] / scene.ray_cap == pytest.approx(0.03125, abs=1e-12)
    view = render_view(scene, Pose(x=4.5, y=2.6, theta=0.0))
    assert view.depth_rays[7] == pytest.approx(0.03125, abs=1e-3)
    assert np.all((view.depth_rays >= 0) & (view.depth_rays <= 1))


def test_kernel_in_view_lands_in_its_bearing_bin() -> None:
    scene = single_kernel_scene()
    view = render_view(scene, Pose(x=1.5, y=2.5, theta=0.0))
    expected = 2.0 * math.exp(-0.5)
    assert view.hotspot_intensity[8] == pytest.approx(expected, abs=1e-12)
    assert view.hotspot_intensity.sum() == pytest.approx(expected, abs=1e-12)


def test_kernel_under_the_camera_counts_as_ahead() -> None:
    view = render_view(single_kernel_scene(), Pose(x=2.5, y=2.5, theta=0.0))
    assert view.hotspot_intensity[8] == pytest.approx(2.0, abs=1e-12)


@pytest.mark.parametrize(
    "pose",
    [Pose(x=1.5, y=2.5, theta=math.pi), Pose(x=2.5, y=1.5, theta=0.0), Pose(x=3.5, y=2.5, theta=1.0)],
    ids=["behind", "beside", "off-axis"],
)
def test_kernel_outside_the_field_of_view_is_dark(pose: Pose) -> None:
    scene = single_kernel_scene()
    assert true_aesthetic(scene, pose) > 0.0
    assert not render_view(scene, pose).hotspot_intensity.any()


def test_kernel_behind_a_wall_is_dark() -> None:
    grid = walled_grid()
    grid[1:-1, 8] = True
    scene = SceneSpec(
        grid=grid,
        hotspots=(
            AestheticKernel(center=(2.5, 2.5), preferred_heading=0.0, spatial_sigma=1.0, angular_sigma=0.5, weight=2.0),
        ),
        scene_id=3,
        rng_seed=3,
        wall_penalty=0.0,
    )
    pose = Pose(x=1.5, y=2.5, theta=0.0)
    assert true_aesthetic(scene, pose) == pytest.approx(2.0 * math.exp(-0.5), abs=1e-12)
    assert not render_view(scene, pose).hotspot_intensity.any()


@pytest.mark.parametrize("angle", [k * math.pi / 4 for k in range(8)])
def test_ring_around_a_kernel(angle: float) -> None:
    scene = single_kernel_scene()
    x, y = 2.5 + math.cos(angle), 2.5 + math.sin(angle)
    away = render_view(scene, Pose(x=x, y=y, theta=angle))
    assert not away.hotspot_intensity.any()

    toward_pose = Pose(x=x, y=y, theta=angle + math.pi)
    toward = render_view(scene, toward_pose)
    assert toward.hotspot_intensity.sum() == pytest.approx(true_aesthetic(scene, toward_pose), abs=1e-12)
    assert int(np.argmax(toward.hotspot_intensity)) in (7, 8)


def test_no_salient_object_gives_sentinel() -> None:
    view = render_view(single_kernel_scene(), Pose(x=2.5, y=2.5, theta=1.0))
    assert not view.salient_present
    assert view.salient_x == -1.0


def salient_scene(grid: np.ndarray, position: tuple) -> SceneSpec:
    return SceneSpec(
        grid=grid,
        hotspots=(
            AestheticKernel(center=(2.5, 2.5), preferred_heading=0.0, spatial_sigma=1, angular_sigma=1, weight=1),
        ),
        salient_objects=(SalientObject(position=position, radius=0.1),),
        scene_id=2,
        rng_seed=2,
    )


def test_salient_object_dead_ahead_projects_to_center() -> None:
    scene = salient_scene(walled_grid(), (3.5, 2.5))
    assert salient_projection(scene, Pose(x=1.0, y=2.5, theta=0.0)) == pytest.approx(0.5, abs=1e-12)


def test_salient_object_at_left_edge() -> None:
    scene = salient_scene(walled_grid(), (3.0, 4.5))
    assert salient_projection(scene, Pose(x=1.0, y=2.5, theta=0.0)) == pytest.approx(0.0, abs=1e-9)


def test_occluded_salient_object_is_absent() -> None:
    grid = walled_grid()
    grid[5:15, 8] = True
    scene = salient_scene(grid, (3.5, 2.5))
    pose = Pose(x=1.0, y=2.5, theta=0.0)
    assert salient_projection(scene, pose) is None
    assert not render_view(scene, pose).salient_present


def test_salient_present_implies_unit_interval(scene: SceneSpec) -> None:
    xs, ys, thetas = sample_pose_arrays(scene, 300, rng_for(2, "salient"))
    views = render_views(scene, xs, ys, thetas)
    present = views[:, 33] > 0.5
    assert np.all((views[present, 32] >= 0) & (views[present, 32] <= 1))
    assert np.all(views[~present, 32] == -1.0)


def test_sample_views(scene: SceneSpec) -> None:
    views = sample_views(scene, 200, seed=4)
    assert len(views) == 200
    assert all(is_navigable(scene, pose.x, pose.y) for pose, _ in views)
    assert len(sample_views(scene, 1, seed=4)) == 1
    again = sample_views(scene, 200, seed=4)
    assert [p for p, _ in again] == [p for p, _ in views]
    with pytest.raises(SceneError):
        sample_views(scene, 0, seed=4)


def test_render_rejects_non_positive_brightness(scene: SceneSpec) -> None:
    with pytest.raises(SceneError):
        render_views(scene, [2.5], [2.5], [0.0], brightness=0.0)
