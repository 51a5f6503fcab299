"""Procedural scenes with a latent aesthetic field.

A scene is a walled occupancy grid (cells of ``cell_size`` metres, indexed
``grid[iy, ix]``) plus a mixture of Gaussian aesthetic kernels over pose space
and a handful of salient objects. Views are rendered by casting 16 rays over a
90 degree field of view into a 35-dimensional feature vector:

    [0:16)   depth_rays          ray distance / ray_cap, left to right
    [16:32)  hotspot_intensity   contributions of the kernels whose centres
                                 are in view, binned by bearing
    32       salient_x           viewport coordinate of the nearest salient
                                 object, -1 when none is visible
    33       salient_present     1.0 or 0.0
    34       brightness          exposure multiplier, 1.0 is well exposed
"""

import json
import logging
import math
from collections import deque
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PrivateAttr,
    field_validator,
    model_validator,
)

from autophoto._utilities import (
    FormatError,
    SceneError,
    dumps_canonical,
    rng_for,
    wrap_angle,
)

logger = logging.getLogger(__name__)

SCENE_FORMAT: str = "autophoto-scene/1"
N_RAYS: int = 16
VIEW_DIM: int = 2 * N_RAYS + 3
DEPTH_SLICE = slice(0, N_RAYS)
HOTSPOT_SLICE = slice(N_RAYS, 2 * N_RAYS)
SALIENT_X: int = 2 * N_RAYS
SALIENT_PRESENT: int = 2 * N_RAYS + 1
BRIGHTNESS: int = 2 * N_RAYS + 2
MIN_GRID_CELLS: int = 16

Range = Tuple[float, float]


class SceneParams(BaseModel):
    """Generation parameters for generate_scene."""

    model_config = ConfigDict(extra="forbid")

    width: int = Field(default=40, description="Grid width in cells (>= 16).")
    height: int = Field(default=40, description="Grid height in cells (>= 16).")
    cell_size: float = Field(default=0.25, gt=0, description="Cell edge in metres.")
    style: Literal["rooms", "open"] = Field(
        default="rooms",
        description="""Layout family.

        "rooms" splits the interior into rectangular rooms separated by
        one-cell walls with door gaps. "open" is a single hall with scattered
        pillar blocks.
        """,
    )
    n_hotspots: int = Field(default=6, ge=0, description="Aesthetic kernels (>= 1).")
    n_salient: int = Field(default=3, ge=0, description="Salient objects.")
    room_splits: int = Field(default=3, ge=0, description="Recursive wall splits.")
    min_room: int = Field(default=7, ge=3, description="Minimum room side in cells.")
    door_width: int = Field(default=3, ge=1, description="Door gap in cells.")
    n_pillars: int = Field(default=6, ge=0, description="Pillar blocks (open style).")
    spatial_sigma: Range = (0.75, 2.0)
    angular_sigma: Range = (0.35, 0.8)
    weight: Range = (1.0, 3.0)
    salient_radius: Range = (0.1, 0.3)
    fov_deg: float = Field(default=90.0, gt=0, lt=360)
    ray_cap: float = Field(default=8.0, gt=0, description="Ray length cap in metres.")
    wall_penalty: float = Field(
        default=0.5,
        ge=0,
        description="Coefficient on (1 - mean depth) subtracted from the field.",
    )

    @field_validator("spatial_sigma", "angular_sigma", "weight", "salient_radius")
    @classmethod
    def _positive_range(cls, value: Range) -> Range:
        low, high = value
        if not 0 < low <= high:
            raise ValueError(f"expected 0 < low <= high, got {value}")
        return value


class AestheticKernel(BaseModel):
    """One Gaussian bump of the latent aesthetic field."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    center: Tuple[float, float]
    preferred_heading: float
    spatial_sigma: float = Field(gt=0)
    angular_sigma: float = Field(gt=0)
    weight: float = Field(gt=0)

    @field_validator("preferred_heading")
    @classmethod
    def _wrap_heading(cls, value: float) -> float:
        return float(wrap_angle(value))


class SalientObject(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    position: Tuple[float, float]
    radius: float = Field(gt=0)


class Pose(BaseModel):
    """Camera position in metres and heading in radians, wrapped to [-pi, pi)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    x: float
    y: float
    theta: float

    @field_validator("theta")
    @classmethod
    def _wrap_theta(cls, value: float) -> float:
        return float(wrap_angle(value))


class ViewObservation(BaseModel):
    """What the camera sees at a pose; stands in for an image."""

    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    depth_rays: np.ndarray
    hotspot_intensity: np.ndarray
    salient_x: float
    salient_present: bool
    brightness: float = Field(gt=0)

    @field_validator("depth_rays", "hotspot_intensity")
    @classmethod
    def _ray_vector(cls, value: Any) -> np.ndarray:
        array = np.asarray(value, dtype=np.float64)
        if array.shape != (N_RAYS,):
            raise ValueError(f"expected {N_RAYS} rays, got shape {array.shape}")
        return array

    @model_validator(mode="after")
    def _check_ranges(self) -> "ViewObservation":
        if np.any(self.depth_rays < 0) or np.any(self.depth_rays > 1):
            raise ValueError("depth_rays must lie in [0, 1]")
        if np.any(self.hotspot_intensity < 0):
            raise ValueError("hotspot_intensity must be non-negative")
        if self.salient_present and not 0.0 <= self.salient_x <= 1.0:
            raise ValueError("salient_x must lie in [0, 1] when present")
        if not self.salient_present and self.salient_x != -1.0:
            raise ValueError("salient_x must be -1 when absent")
        return self

    def as_vector(self) -> np.ndarray:
        vector = np.empty(VIEW_DIM)
        vector[DEPTH_SLICE] = self.depth_rays
        vector[HOTSPOT_SLICE] = self.hotspot_intensity
        vector[SALIENT_X] = self.salient_x
        vector[SALIENT_PRESENT] = 1.0 if self.salient_present else 0.0
        vector[BRIGHTNESS] = self.brightness
        return vector

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "ViewObservation":
        return cls(
            depth_rays=vector[DEPTH_SLICE].copy(),
            hotspot_intensity=vector[HOTSPOT_SLICE].copy(),
            salient_x=float(vector[SALIENT_X]),
            salient_present=bool(vector[SALIENT_PRESENT] > 0.5),
            brightness=float(vector[BRIGHTNESS]),
        )


class SceneSpec(BaseModel):
    """An immutable, generated world. Safe to share between rollout workers."""

    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    grid: np.ndarray
    """Occupancy, True where blocked, indexed grid[iy, ix]."""
    hotspots: Tuple[AestheticKernel, ...]
    salient_objects: Tuple[SalientObject, ...] = ()
    scene_id: int
    rng_seed: int
    cell_size: float = Field(default=0.25, gt=0)
    fov_deg: float = Field(default=90.0, gt=0, lt=360)
    ray_cap: float = Field(default=8.0, gt=0)
    wall_penalty: float = Field(default=0.5, ge=0)
    style: str = "rooms"

    _kernels: np.ndarray = PrivateAttr()
    _free_cells: np.ndarray = PrivateAttr()

    @field_validator("grid")
    @classmethod
    def _as_bool_grid(cls, value: Any) -> np.ndarray:
        grid = np.array(value, dtype=bool)
        if grid.ndim != 2:
            raise ValueError(f"grid must be 2-D, got shape {grid.shape}")
        grid.setflags(write=False)
        return grid

    @model_validator(mode="after")
    def _check_world(self) -> "SceneSpec":
        grid = self.grid
        if not (grid[0, :].all() and grid[-1, :].all() and grid[:, 0].all() and grid[:, -1].all()):
            raise ValueError("boundary cells must be occupied")
        if grid.all():
            raise ValueError("scene has no navigable cell")
        for kernel in self.hotspots:
            x, y = kernel.center
            if not (0 <= x < self.world_width and 0 <= y < self.world_height):
                raise ValueError(f"hotspot center {kernel.center} outside the grid")
        return self

    def model_post_init(self, __context: Any) -> None:
        self._kernels = np.array(
            [
                [k.center[0], k.center[1], k.preferred_heading, k.spatial_sigma, k.angular_sigma, k.weight]
                for k in self.hotspots
            ],
            dtype=np.float64,
        ).reshape(-1, 6)
        self._free_cells = np.argwhere(~self.grid)

    @property
    def height(self) -> int:
        return int(self.grid.shape[0])

    @property
    def width(self) -> int:
        return int(self.grid.shape[1])

    @property
    def world_width(self) -> float:
        return self.width * self.cell_size

    @property
    def world_height(self) -> float:
        return self.height * self.cell_size

    @property
    def fov(self) -> float:
        return math.radians(self.fov_deg)

    @property
    def kernel_table(self) -> np.ndarray:
        """(K, 6) array: x, y, heading, spatial sigma, angular sigma, weight."""
        return self._kernels

    @property
    def free_cells(self) -> np.ndarray:
        """(F, 2) array of (iy, ix) for navigable cells, row-major order."""
        return self._free_cells

    def ray_offsets(self) -> np.ndarray:
        """Ray angles relative to the heading, left (+) to right (-)."""
        fov = self.fov
        return fov / 2.0 - (np.arange(N_RAYS) + 0.5) * fov / N_RAYS


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------
def _split_rooms(
    grid: np.ndarray,
    rng: np.random.Generator,
    bounds: Tuple[int, int, int, int],
    depth: int,
    params: SceneParams,
) -> None:
    x0, y0, x1, y1 = bounds
    if depth >= params.room_splits:
        return
    width, height = x1 - x0, y1 - y0
    span = 2 * params.min_room + 1
    can_split_x, can_split_y = width >= span, height >= span
    if not (can_split_x or can_split_y):
        return
    if can_split_x and can_split_y:
        vertical = width > height or (width == height and rng.random() < 0.5)
    else:
        vertical = can_split_x
    door = params.door_width
    if vertical:
        wall = int(rng.integers(x0 + params.min_room, x1 - params.min_room))
        grid[y0:y1, wall] = True
        gap = int(rng.integers(y0, max(y0 + 1, y1 - door + 1)))
        grid[gap : gap + door, wall] = False
        _split_rooms(grid, rng, (x0, y0, wall, y1), depth + 1, params)
        _split_rooms(grid, rng, (wall + 1, y0, x1, y1), depth + 1, params)
    else:
        wall = int(rng.integers(y0 + params.min_room, y1 - params.min_room))
        grid[wall, x0:x1] = True
        gap = int(rng.integers(x0, max(x0 + 1, x1 - door + 1)))
        grid[wall, gap : gap + door] = False
        _split_rooms(grid, rng, (x0, y0, x1, wall), depth + 1, params)
        _split_rooms(grid, rng, (x0, wall + 1, x1, y1), depth + 1, params)


def _place_pillars(grid: np.ndarray, rng: np.random.Generator, params: SceneParams) -> None:
    height, width = grid.shape
    for _ in range(params.n_pillars):
        w, h = (int(v) for v in rng.integers(1, 4, size=2))
        ix = int(rng.integers(3, max(4, width - 3 - w)))
        iy = int(rng.integers(3, max(4, height - 3 - h)))
        grid[iy : iy + h, ix : ix + w] = True


def _keep_largest_region(grid: np.ndarray) -> None:
    """Fill every free pocket except the largest 4-connected one."""
    labels = np.full(grid.shape, -1, dtype=np.int64)
    sizes: List[int] = []
    height, width = grid.shape
    for iy, ix in np.argwhere(~grid):
        if labels[iy, ix] >= 0:
            continue
        label = len(sizes)
        labels[iy, ix] = label
        queue = deque([(int(iy), int(ix))])
        size = 0
        while queue:
            cy, cx = queue.popleft()
            size += 1
            for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                if 0 <= ny < height and 0 <= nx < width and not grid[ny, nx] and labels[ny, nx] < 0:
                    labels[ny, nx] = label
                    queue.append((ny, nx))
        sizes.append(size)
    if len(sizes) > 1:
        keep = int(np.argmax(sizes))
        grid[(labels >= 0) & (labels != keep)] = True


def generate_scene(
    seed: int, params: Optional[SceneParams] = None, scene_id: Optional[int] = None
) -> SceneSpec:
    """Build a walled scene with rooms (or an open hall), hotspots and objects.

    The result is a pure function of ``(seed, params, scene_id)``;
    ``scene_id`` defaults to ``seed``.
    """
    params = params or SceneParams()
    if params.width < MIN_GRID_CELLS or params.height < MIN_GRID_CELLS:
        raise SceneError(
            f"grid must be at least {MIN_GRID_CELLS}x{MIN_GRID_CELLS} cells, "
            f"got {params.width}x{params.height}"
        )
    if params.n_hotspots < 1:
        raise SceneError("a scene needs at least one aesthetic hotspot")

    rng = rng_for(seed, "scene")
    grid = np.ones((params.height, params.width), dtype=bool)
    grid[1:-1, 1:-1] = False
    if params.style == "rooms":
        _split_rooms(grid, rng, (1, 1, params.width - 1, params.height - 1), 0, params)
    else:
        _place_pillars(grid, rng, params)
    _keep_largest_region(grid)

    free = np.argwhere(~grid)
    if free.size == 0:
        raise SceneError("generation left no navigable cell")
    c = params.cell_size

    def cell_center() -> Tuple[float, float]:
        iy, ix = free[int(rng.integers(len(free)))]
        return (float((ix + 0.5) * c), float((iy + 0.5) * c))

    hotspots = []
    for _ in range(params.n_hotspots):
        center = cell_center()
        hotspots.append(
            AestheticKernel(
                center=center,
                preferred_heading=float(rng.uniform(-math.pi, math.pi)),
                spatial_sigma=float(rng.uniform(*params.spatial_sigma)),
                angular_sigma=float(rng.uniform(*params.angular_sigma)),
                weight=float(rng.uniform(*params.weight)),
            )
        )
    salient = [
        SalientObject(position=cell_center(), radius=float(rng.uniform(*params.salient_radius)))
        for _ in range(params.n_salient)
    ]
    scene = SceneSpec(
        grid=grid,
        hotspots=tuple(hotspots),
        salient_objects=tuple(salient),
        scene_id=seed if scene_id is None else scene_id,
        rng_seed=seed,
        cell_size=c,
        fov_deg=params.fov_deg,
        ray_cap=params.ray_cap,
        wall_penalty=params.wall_penalty,
        style=params.style,
    )
    logger.debug(
        "generated scene %d (%s): %d navigable cells, %d hotspots",
        scene.scene_id,
        params.style,
        len(free),
        len(hotspots),
    )
    return scene


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------
def navigable_mask(scene: SceneSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    ix = np.floor(np.asarray(xs, dtype=np.float64) / scene.cell_size).astype(np.int64)
    iy = np.floor(np.asarray(ys, dtype=np.float64) / scene.cell_size).astype(np.int64)
    inside = (ix >= 0) & (ix < scene.width) & (iy >= 0) & (iy < scene.height)
    result = np.zeros(ix.shape, dtype=bool)
    result[inside] = ~scene.grid[iy[inside], ix[inside]]
    return result


def is_navigable(scene: SceneSpec, x: float, y: float) -> bool:
    return bool(navigable_mask(scene, np.array([x]), np.array([y]))[0])


def _require_navigable(scene: SceneSpec, pose: Pose) -> None:
    if not is_navigable(scene, pose.x, pose.y):
        raise SceneError(f"pose ({pose.x:.3f}, {pose.y:.3f}) is not navigable in scene {scene.scene_id}")


def cast_rays(
    scene: SceneSpec, xs: np.ndarray, ys: np.ndarray, angles: np.ndarray
) -> np.ndarray:
    """DDA ray casting: distance to the first occupied cell, capped at ray_cap.

    All inputs broadcast together; every ray is stepped cell by cell in one
    vectorised loop and dropped from the live set once it hits.
    """
    xs, ys, angles = np.broadcast_arrays(
        np.asarray(xs, dtype=np.float64),
        np.asarray(ys, dtype=np.float64),
        np.asarray(angles, dtype=np.float64),
    )
    shape = xs.shape
    ox, oy, ang = xs.ravel(), ys.ravel(), angles.ravel()
    c, cap, grid = scene.cell_size, scene.ray_cap, scene.grid
    height, width = grid.shape

    dx, dy = np.cos(ang), np.sin(ang)
    cx = np.floor(ox / c).astype(np.int64)
    cy = np.floor(oy / c).astype(np.int64)
    sx = np.where(dx > 0, 1, -1)
    sy = np.where(dy > 0, 1, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_dx = np.where(dx != 0.0, 1.0 / np.abs(dx), np.inf)
        inv_dy = np.where(dy != 0.0, 1.0 / np.abs(dy), np.inf)
        tdx, tdy = c * inv_dx, c * inv_dy
        edge_x = np.where(dx > 0, (cx + 1) * c, cx * c)
        edge_y = np.where(dy > 0, (cy + 1) * c, cy * c)
        tmx = np.where(dx != 0.0, np.abs(edge_x - ox) * inv_dx, np.inf)
        tmy = np.where(dy != 0.0, np.abs(edge_y - oy) * inv_dy, np.inf)

    dist = np.full(ox.shape, cap)
    live = np.arange(ox.size)
    while live.size:
        along_x = tmx < tmy
        t = np.where(along_x, tmx, tmy)
        cx = np.where(along_x, cx + sx, cx)
        cy = np.where(along_x, cy, cy + sy)
        tmx = np.where(along_x, tmx + tdx, tmx)
        tmy = np.where(along_x, tmy, tmy + tdy)
        inside = (cx >= 0) & (cx < width) & (cy >= 0) & (cy < height)
        hit = ~inside
        hit[inside] = grid[cy[inside], cx[inside]]
        stop = hit | (t >= cap)
        dist[live[stop]] = np.minimum(t[stop], cap)
        keep = ~stop
        live, cx, cy, sx, sy = live[keep], cx[keep], cy[keep], sx[keep], sy[keep]
        tmx, tmy, tdx, tdy = tmx[keep], tmy[keep], tdx[keep], tdy[keep]
    return dist.reshape(shape)


def _kernel_contributions(
    scene: SceneSpec, xs: np.ndarray, ys: np.ndarray, thetas: np.ndarray
) -> np.ndarray:
    """(B, K) kernel values at each pose."""
    kx, ky, heading, s_sigma, a_sigma, weight = scene.kernel_table.T
    d2 = (xs[:, None] - kx) ** 2 + (ys[:, None] - ky) ** 2
    dtheta = wrap_angle(thetas[:, None] - heading)
    return weight * np.exp(-d2 / (2.0 * s_sigma**2)) * np.exp(-(dtheta**2) / (2.0 * a_sigma**2))


def _salient_viewport(
    scene: SceneSpec, xs: np.ndarray, ys: np.ndarray, thetas: np.ndarray
) -> np.ndarray:
    n = xs.shape[0]
    if not scene.salient_objects:
        return np.full(n, -1.0)
    objects = np.array([o.position for o in scene.salient_objects], dtype=np.float64)
    radii = np.array([o.radius for o in scene.salient_objects], dtype=np.float64)
    ddx = objects[None, :, 0] - xs[:, None]
    ddy = objects[None, :, 1] - ys[:, None]
    dist = np.hypot(ddx, ddy)
    bearing = np.arctan2(ddy, ddx)
    rel = wrap_angle(bearing - thetas[:, None])
    half_fov = scene.fov / 2.0
    candidate = (np.abs(rel) <= half_fov + 1e-9) & (dist > 1e-9) & (dist <= scene.ray_cap)

    clear = np.zeros_like(candidate)
    rows, cols = np.nonzero(candidate)
    if rows.size:
        wall = cast_rays(scene, xs[rows], ys[rows], bearing[rows, cols])
        clear[rows, cols] = wall >= dist[rows, cols] - radii[cols]
    ranked = np.where(clear, dist, np.inf)
    nearest = np.argmin(ranked, axis=1)
    visible = np.isfinite(ranked[np.arange(n), nearest])
    coord = np.clip((half_fov - rel[np.arange(n), nearest]) / scene.fov, 0.0, 1.0)
    return np.where(visible, coord, -1.0)


def _hotspot_bins(
    scene: SceneSpec, xs: np.ndarray, ys: np.ndarray, thetas: np.ndarray, values: np.ndarray
) -> np.ndarray:
    """(B, 16) kernel values summed into the ray bin of each visible kernel centre.

    A centre is visible when it lies inside the field of view, closer than
    ray_cap, and the ray cast along its bearing reaches it. A centre within half
    a cell of the camera counts as straight ahead.
    """
    n, k = values.shape
    intensity = np.zeros((n, N_RAYS))
    if k == 0:
        return intensity
    ddx = scene.kernel_table[None, :, 0] - xs[:, None]
    ddy = scene.kernel_table[None, :, 1] - ys[:, None]
    dist = np.hypot(ddx, ddy)
    bearing = np.arctan2(ddy, ddx)
    at_camera = dist < 0.5 * scene.cell_size
    rel = np.where(at_camera, 0.0, wrap_angle(bearing - thetas[:, None]))
    half_fov = scene.fov / 2.0

    in_view = ~at_camera & (np.abs(rel) <= half_fov + 1e-9) & (dist < scene.ray_cap)
    visible = at_camera.copy()
    rows, cols = np.nonzero(in_view)
    if rows.size:
        wall = cast_rays(scene, xs[rows], ys[rows], bearing[rows, cols])
        visible[rows, cols] = wall >= dist[rows, cols]

    # ray i covers offsets (half_fov - (i + 1) * step, half_fov - i * step]
    bins = np.clip(np.floor((half_fov - rel) / scene.fov * N_RAYS).astype(np.int64), 0, N_RAYS - 1)
    rows, cols = np.nonzero(visible)
    np.add.at(intensity, (rows, bins[rows, cols]), values[rows, cols])
    return intensity


def _as_pose_arrays(
    xs: Any, ys: Any, thetas: Any
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        np.atleast_1d(np.asarray(xs, dtype=np.float64)),
        np.atleast_1d(np.asarray(ys, dtype=np.float64)),
        wrap_angle(np.atleast_1d(np.asarray(thetas, dtype=np.float64))),
    )


def render_views(
    scene: SceneSpec,
    xs: Any,
    ys: Any,
    thetas: Any,
    brightness: Union[float, np.ndarray] = 1.0,
) -> np.ndarray:
    """Render a batch of poses into a (B, 35) array of view vectors."""
    xs, ys, thetas = _as_pose_arrays(xs, ys, thetas)
    n = xs.shape[0]
    bright = np.broadcast_to(np.asarray(brightness, dtype=np.float64), (n,))
    if np.any(bright <= 0):
        raise SceneError("brightness must be positive")

    views = np.empty((n, VIEW_DIM))
    offsets = scene.ray_offsets()
    views[:, DEPTH_SLICE] = (
        cast_rays(scene, xs[:, None], ys[:, None], thetas[:, None] + offsets[None, :]) / scene.ray_cap
    )

    values = _kernel_contributions(scene, xs, ys, thetas)
    views[:, HOTSPOT_SLICE] = _hotspot_bins(scene, xs, ys, thetas, values)

    salient_x = _salient_viewport(scene, xs, ys, thetas)
    views[:, SALIENT_X] = salient_x
    views[:, SALIENT_PRESENT] = (salient_x >= 0).astype(np.float64)
    views[:, BRIGHTNESS] = bright
    return views


def render_view(scene: SceneSpec, pose: Pose, brightness: float = 1.0) -> ViewObservation:
    _require_navigable(scene, pose)
    return ViewObservation.from_vector(render_views(scene, pose.x, pose.y, pose.theta, brightness)[0])


def expose(views: np.ndarray, brightness: Union[float, np.ndarray]) -> np.ndarray:
    """Copy of ``views`` with the exposure channel replaced."""
    exposed = np.array(views, dtype=np.float64, copy=True)
    exposed[..., BRIGHTNESS] = brightness
    return exposed


def true_aesthetic_batch(scene: SceneSpec, xs: Any, ys: Any, thetas: Any) -> np.ndarray:
    xs, ys, thetas = _as_pose_arrays(xs, ys, thetas)
    values = _kernel_contributions(scene, xs, ys, thetas)
    offsets = scene.ray_offsets()
    depth = cast_rays(scene, xs[:, None], ys[:, None], thetas[:, None] + offsets[None, :]) / scene.ray_cap
    return values.sum(axis=1) - scene.wall_penalty * (1.0 - depth.mean(axis=1))


def true_aesthetic(scene: SceneSpec, pose: Pose) -> float:
    """Ground-truth aesthetic value of a pose: kernel mixture minus wall penalty."""
    _require_navigable(scene, pose)
    return float(true_aesthetic_batch(scene, pose.x, pose.y, pose.theta)[0])


def salient_projection(scene: SceneSpec, pose: Pose) -> Optional[float]:
    """Viewport coordinate of the nearest visible salient object, if any."""
    _require_navigable(scene, pose)
    coord = float(_salient_viewport(scene, *_as_pose_arrays(pose.x, pose.y, pose.theta))[0])
    return None if coord < 0 else coord


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------
def sample_pose_arrays(
    scene: SceneSpec, n: int, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Uniform over navigable cells, uniform inside the cell, uniform heading."""
    cells = scene.free_cells[rng.integers(len(scene.free_cells), size=n)]
    c = scene.cell_size
    xs = (cells[:, 1] + rng.random(n)) * c
    ys = (cells[:, 0] + rng.random(n)) * c
    thetas = rng.uniform(-math.pi, math.pi, size=n)
    return xs, ys, thetas


def sample_view_arrays(
    scene: SceneSpec, n: int, seed: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Array form of sample_views: xs, ys, thetas and (n, 35) views."""
    if n < 1:
        raise SceneError(f"sample_views needs n >= 1, got {n}")
    xs, ys, thetas = sample_pose_arrays(scene, n, rng_for(seed, "sample_views", scene.scene_id))
    return xs, ys, thetas, render_views(scene, xs, ys, thetas)


def sample_views(scene: SceneSpec, n: int, seed: int) -> List[Tuple[Pose, ViewObservation]]:
    xs, ys, thetas, views = sample_view_arrays(scene, n, seed)
    return [
        (Pose(x=float(x), y=float(y), theta=float(t)), ViewObservation.from_vector(v))
        for x, y, t, v in zip(xs, ys, thetas, views)
    ]


# ---------------------------------------------------------------------------
# Scene files
# ---------------------------------------------------------------------------
def scene_to_dict(scene: SceneSpec, meta: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {
        "format": SCENE_FORMAT,
        "scene_id": scene.scene_id,
        "rng_seed": scene.rng_seed,
        "width": scene.width,
        "height": scene.height,
        "cell_size": scene.cell_size,
        "style": scene.style,
        "fov_deg": scene.fov_deg,
        "n_rays": N_RAYS,
        "ray_cap": scene.ray_cap,
        "wall_penalty": scene.wall_penalty,
        "occupancy": np.packbits(scene.grid.ravel()).tobytes().hex(),
        "hotspots": [k.model_dump() for k in scene.hotspots],
        "salient_objects": [o.model_dump() for o in scene.salient_objects],
        "meta": meta,
    }


def scene_to_json(scene: SceneSpec, meta: Optional[Dict[str, Any]] = None) -> str:
    return dumps_canonical(scene_to_dict(scene, meta))


def scene_from_dict(payload: Dict[str, Any]) -> SceneSpec:
    if payload.get("format") != SCENE_FORMAT:
        raise FormatError(f"not a scene file: format {payload.get('format')!r}")
    if payload.get("n_rays", N_RAYS) != N_RAYS:
        raise FormatError(f"scene uses {payload['n_rays']} rays, expected {N_RAYS}")
    try:
        width, height = int(payload["width"]), int(payload["height"])
        bits = np.unpackbits(np.frombuffer(bytes.fromhex(payload["occupancy"]), dtype=np.uint8))
        grid = bits[: width * height].reshape(height, width).astype(bool)
        return SceneSpec(
            grid=grid,
            hotspots=tuple(AestheticKernel(**k) for k in payload["hotspots"]),
            salient_objects=tuple(SalientObject(**o) for o in payload["salient_objects"]),
            scene_id=payload["scene_id"],
            rng_seed=payload["rng_seed"],
            cell_size=payload["cell_size"],
            fov_deg=payload["fov_deg"],
            ray_cap=payload["ray_cap"],
            wall_penalty=payload["wall_penalty"],
            style=payload["style"],
        )
    except (KeyError, ValueError) as e:
        raise FormatError(f"malformed scene file: {e}") from e


def save_scene(path: Union[str, Path], scene: SceneSpec, meta: Optional[Dict[str, Any]] = None) -> None:
    Path(path).write_text(scene_to_json(scene, meta) + "\n", encoding="utf-8")


def load_scene(path: Union[str, Path]) -> SceneSpec:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: {e}") from e
    return scene_from_dict(payload)


def load_scenes(directory: Union[str, Path]) -> List[SceneSpec]:
    """All scene files of a directory, in file-name order."""
    return [load_scene(p) for p in sorted(Path(directory).glob("*.json"))]
