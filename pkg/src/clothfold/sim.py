"""Particle-grid cloth model: reflection folds, top-down rendering, metrics.

The cloth is a rectangular grid of particles with planar positions and an
integer stack index per particle. A pick-and-place action folds the cloth by
reflecting every particle on the grasp side of the perpendicular bisector of
grasp->place; reflected particles land on top of the stack (layer reversal
2*M+1-l). Height above the table is implied, z = layer * thickness_m.

All operations are pure: they never mutate their inputs and RNG state enters
only through NoiseParams seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidCloth, ShapeMismatch

DEFAULT_WORKSPACE_M = 0.4
DEFAULT_GRID = 24
DEFAULT_SPACING_M = 0.01
DEFAULT_THICKNESS_M = 0.002
DEFAULT_RESOLUTION = 64
GRASP_RADIUS_FACTOR = 1.5

# Displacements below this are treated as "no fold line" rather than a fold.
_DEGENERATE_DISP_M = 1e-9


@dataclass
class ClothState:
    """Rectangular particle grid; index i runs row-major over (grid_h, grid_w)."""

    grid_w: int
    grid_h: int
    positions: np.ndarray  # (N, 2) meters, workspace frame
    layers: np.ndarray  # (N,) non-negative stack indices
    spacing_m: float
    thickness_m: float

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.layers = np.asarray(self.layers, dtype=np.int64)
        n = self.grid_w * self.grid_h
        if self.positions.shape != (n, 2):
            raise InvalidCloth(
                f"positions shape {self.positions.shape} != ({n}, 2)")
        if self.layers.shape != (n,):
            raise InvalidCloth(f"layers shape {self.layers.shape} != ({n},)")
        if not np.isfinite(self.positions).all():
            raise InvalidCloth("non-finite particle position")
        if (self.layers < 0).any():
            raise InvalidCloth("negative layer index")

    @property
    def n_particles(self) -> int:
        return self.grid_w * self.grid_h

    def heights_m(self) -> np.ndarray:
        """Implied z coordinate of every particle."""
        return self.layers * self.thickness_m

    def to_dict(self) -> dict:
        return {
            "grid_w": self.grid_w,
            "grid_h": self.grid_h,
            "spacing_m": self.spacing_m,
            "thickness_m": self.thickness_m,
            "positions": [float(v) for v in self.positions.ravel()],
            "layers": [int(v) for v in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClothState":
        pos = np.asarray(d["positions"], dtype=np.float64).reshape(-1, 2)
        return cls(
            grid_w=int(d["grid_w"]),
            grid_h=int(d["grid_h"]),
            positions=pos,
            layers=np.asarray(d["layers"], dtype=np.int64),
            spacing_m=float(d["spacing_m"]),
            thickness_m=float(d["thickness_m"]),
        )


@dataclass
class FoldAction:
    """One grasp-and-place primitive: grasp at g, drop at p (meters)."""

    grasp: np.ndarray
    place: np.ndarray

    def __post_init__(self):
        self.grasp = np.asarray(self.grasp, dtype=np.float64).reshape(2)
        self.place = np.asarray(self.place, dtype=np.float64).reshape(2)

    def to_dict(self) -> dict:
        return {"grasp": [float(v) for v in self.grasp],
                "place": [float(v) for v in self.place]}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldAction":
        return cls(grasp=d["grasp"], place=d["place"])


@dataclass
class Observation:
    """Top-down binary occupancy plus per-pixel max layer.

    Arrays are indexed [i, j] where i bins the x axis and j the y axis;
    pixel (i, j) covers the square [i*s, (i+1)*s) x [j*s, (j+1)*s) with
    s = pixel_to_meter.
    """

    resolution: int
    occupancy: np.ndarray  # (R, R) uint8 in {0, 1}
    height: np.ndarray  # (R, R) int64, max layer among particles in the pixel
    pixel_to_meter: float

    def key(self) -> tuple:
        """Hashable identity of the rendered image."""
        return (self.resolution, self.occupancy.tobytes(), self.height.tobytes())


@dataclass
class NoiseParams:
    """Execution noise: grasp placement error and post-fold settle jitter.

    Zero sigmas make apply_fold bit-deterministic (no RNG draws at all).
    """

    grasp_sigma_m: float = 0.0
    settle_sigma_m: float = 0.0
    seed: int = 0


def new_flat_cloth(grid_w: int = DEFAULT_GRID,
                   grid_h: int = DEFAULT_GRID,
                   spacing_m: float = DEFAULT_SPACING_M,
                   thickness_m: float = DEFAULT_THICKNESS_M,
                   workspace_m: float = DEFAULT_WORKSPACE_M) -> ClothState:
    """Flat axis-aligned grid centered in the workspace, all layers 0."""
    if grid_w < 2 or grid_h < 2:
        raise InvalidCloth(f"grid {grid_w}x{grid_h}: both sides must be >= 2")
    if spacing_m <= 0:
        raise InvalidCloth(f"spacing_m must be positive, got {spacing_m}")
    span_x = (grid_w - 1) * spacing_m
    span_y = (grid_h - 1) * spacing_m
    x0 = (workspace_m - span_x) / 2.0
    y0 = (workspace_m - span_y) / 2.0
    xs = x0 + spacing_m * np.arange(grid_w)
    ys = y0 + spacing_m * np.arange(grid_h)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    positions = np.column_stack([gx.ravel(), gy.ravel()])
    return ClothState(
        grid_w=grid_w,
        grid_h=grid_h,
        positions=positions,
        layers=np.zeros(grid_w * grid_h, dtype=np.int64),
        spacing_m=spacing_m,
        thickness_m=thickness_m,
    )


def grasp_radius(state: ClothState) -> float:
    """Radius within which a grasp point attaches to the cloth."""
    return GRASP_RADIUS_FACTOR * state.spacing_m


def apply_fold(state: ClothState,
               action: FoldAction,
               noise: NoiseParams | None = None,
               workspace_m: float = DEFAULT_WORKSPACE_M):
    """Execute one pick-and-place fold. Returns (new_state, executed).

    The fold reflects every particle q with (q - m).n < 0 across the
    perpendicular bisector of grasp->place (m = midpoint, n = unit(p - g)),
    assigning reflected layers 2*M + 1 - l with M the max layer of the moved
    stack before the fold (the flipped stack lands top-down above it).
    A grasp landing farther than grasp_radius from every particle, or a
    degenerate zero-length displacement, leaves the state unchanged with
    executed = False.
    """
    g = action.grasp.copy()
    p = action.place
    for pt, name in ((action.grasp, "grasp"), (p, "place")):
        if (pt < 0).any() or (pt > workspace_m).any():
            raise ValueError(f"{name} point {pt} outside workspace "
                             f"[0, {workspace_m}]^2")
    rng = None
    if noise is not None and (noise.grasp_sigma_m > 0 or noise.settle_sigma_m > 0):
        rng = np.random.default_rng(noise.seed)
    if rng is not None and noise.grasp_sigma_m > 0:
        g = g + rng.normal(0.0, noise.grasp_sigma_m, size=2)

    disp = p - g
    length = float(np.linalg.norm(disp))
    if length < _DEGENERATE_DISP_M:
        return state, False
    dists = np.linalg.norm(state.positions - g, axis=1)
    if dists.min() > grasp_radius(state):
        return state, False

    n = disp / length
    m = (g + p) / 2.0
    signed = (state.positions - m) @ n
    moving = signed < 0.0

    positions = state.positions.copy()
    layers = state.layers.copy()
    positions[moving] = positions[moving] - 2.0 * signed[moving, None] * n[None, :]
    if moving.any():
        max_layer = int(state.layers[moving].max())
        layers[moving] = 2 * max_layer + 1 - layers[moving]
        if rng is not None and noise.settle_sigma_m > 0:
            jitter = rng.normal(0.0, noise.settle_sigma_m,
                                size=(int(moving.sum()), 2))
            positions[moving] += jitter

    new_state = ClothState(
        grid_w=state.grid_w,
        grid_h=state.grid_h,
        positions=positions,
        layers=layers,
        spacing_m=state.spacing_m,
        thickness_m=state.thickness_m,
    )
    return new_state, True


def _pixel_indices(positions: np.ndarray, resolution: int, workspace_m: float):
    s = workspace_m / resolution
    idx = np.floor(positions / s).astype(np.int64)
    return np.clip(idx, 0, resolution - 1)


def snap_to_pixel_center(point, resolution: int, workspace_m: float) -> np.ndarray:
    """Workspace point quantized to the center of its image pixel."""
    s = workspace_m / resolution
    idx = _pixel_indices(np.asarray(point, dtype=np.float64)[None, :],
                         resolution, workspace_m)[0]
    return (idx + 0.5) * s


def render(state: ClothState,
           resolution: int = DEFAULT_RESOLUTION,
           workspace_m: float = DEFAULT_WORKSPACE_M) -> Observation:
    """Splat particles into a top-down occupancy / max-layer image.

    Each particle stands for a spacing-sized square patch of cloth centered
    on it, so a flat grid renders as a filled block rather than isolated
    dots. A pixel shows cloth when any patch covers its center; its height is
    the max layer among covering patches.
    """
    if resolution < 8:
        raise ValueError(f"resolution must be >= 8, got {resolution}")
    px = workspace_m / resolution
    half = state.spacing_m / 2.0
    occupancy = np.zeros((resolution, resolution), dtype=np.uint8)
    height = np.zeros((resolution, resolution), dtype=np.int64)
    # Pixel centers covered by a patch around (x, y): indices in
    # [ceil((v - half)/px - 0.5), floor((v + half)/px - 0.5)] per axis.
    lo = np.ceil((state.positions - half) / px - 0.5).astype(np.int64)
    hi = np.floor((state.positions + half) / px - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, resolution - 1)
    span = hi - lo
    if span.size and span.max() >= 0:
        max_span = int(span.max())
        for dx in range(max_span + 1):
            for dy in range(max_span + 1):
                ok = (dx <= span[:, 0]) & (dy <= span[:, 1])
                if not ok.any():
                    continue
                ii = lo[ok, 0] + dx
                jj = lo[ok, 1] + dy
                occupancy[ii, jj] = 1
                np.maximum.at(height, (ii, jj), state.layers[ok])
    return Observation(
        resolution=resolution,
        occupancy=occupancy,
        height=height,
        pixel_to_meter=px,
    )


def mean_particle_distance(state: ClothState, goal: ClothState,
                           planar: bool = False) -> float:
    """Mean per-particle distance to the goal configuration, in millimeters.

    3D by default (z implied from layers); planar=True drops the z term.
    """
    if (state.grid_w, state.grid_h) != (goal.grid_w, goal.grid_h):
        raise ShapeMismatch(
            f"grid {state.grid_w}x{state.grid_h} vs {goal.grid_w}x{goal.grid_h}")
    d2 = np.sum((state.positions - goal.positions) ** 2, axis=1)
    if not planar:
        d2 = d2 + (state.heights_m() - goal.heights_m()) ** 2
    return float(np.mean(np.sqrt(d2)) * 1000.0)


def max_particle_movement(before: ClothState, after: ClothState) -> float:
    """Largest planar particle displacement between two states, millimeters."""
    if (before.grid_w, before.grid_h) != (after.grid_w, after.grid_h):
        raise ShapeMismatch(
            f"grid {before.grid_w}x{before.grid_h} vs "
            f"{after.grid_w}x{after.grid_h}")
    d = np.linalg.norm(after.positions - before.positions, axis=1)
    return float(d.max() * 1000.0)


def mask_iou(a: Observation, b: Observation) -> float:
    """Intersection over union of occupancy masks; 1.0 when both are empty."""
    if a.resolution != b.resolution:
        raise ShapeMismatch(f"resolution {a.resolution} vs {b.resolution}")
    ma = a.occupancy.astype(bool)
    mb = b.occupancy.astype(bool)
    union = np.logical_or(ma, mb).sum()
    if union == 0:
        return 1.0
    inter = np.logical_and(ma, mb).sum()
    return float(inter) / float(union)


def observation_to_pgm(obs: Observation, channel: str = "occupancy") -> bytes:
    """Encode one observation channel as a binary 8-bit PGM (P5) image."""
    if channel == "occupancy":
        img = obs.occupancy.astype(np.uint8) * 255
    elif channel == "height":
        top = int(obs.height.max())
        if top == 0:
            img = np.zeros_like(obs.height, dtype=np.uint8)
        else:
            img = np.round(obs.height * (255.0 / top)).astype(np.uint8)
    else:
        raise ValueError(f"unknown channel {channel!r}")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    return header + img.tobytes()


def save_pgm(obs: Observation, path, channel: str = "occupancy") -> None:
    with open(path, "wb") as fh:
        fh.write(observation_to_pgm(obs, channel))
