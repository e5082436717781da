"""Flow-based action inference: per-pixel displacement toward a sub-goal,
pick selection through a heatmap argmax, place by querying the flow.

The flow field is exact: the simulator knows particle correspondences, so
each cloth pixel carries the displacement of its topmost particle toward the
goal configuration. The pick scorer has a parameter-free geometric variant
(normalized flow magnitude) and a trained logistic variant over simple
per-pixel features; both feed the same argmax-and-query mechanics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .datagen import DEFAULT_DELTA_MOVE_MM, Dataset
from .errors import (EmptyFlow, InsufficientPairs, InvalidPick, ShapeMismatch,
                     UnsupportedVariant)
from .latent import EncodedDataset, EncoderModel, encode
from .sim import (DEFAULT_RESOLUTION, DEFAULT_WORKSPACE_M, ClothState,
                  FoldAction, Observation, _pixel_indices, render)

SCORER_GEOMETRIC = "geometric"
SCORER_LOGISTIC = "trained-logistic"

_BCE_CLAMP = 1e-7
PICK_LABEL_SIGMA_PX = 2.0

# Per-pixel features for the logistic scorer, in order:
# flow magnitude / R, topmost-layer flag, distance to mask edge / R, bias.
N_PICK_FEATURES = 4


@dataclass
class FlowField:
    """Per-pixel 2D displacement in pixel units; invalid pixels are zero."""

    vectors: np.ndarray  # (R, R, 2) float64
    valid: np.ndarray  # (R, R) bool

    @property
    def resolution(self) -> int:
        return self.valid.shape[0]

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=2)


@dataclass
class PickScorer:
    variant: str = SCORER_GEOMETRIC
    weights: np.ndarray | None = None  # (N_PICK_FEATURES,) for the trained variant


def oracle_flow(current: ClothState, goal: ClothState,
                resolution: int = DEFAULT_RESOLUTION,
                workspace_m: float = DEFAULT_WORKSPACE_M) -> FlowField:
    """Displacement of each pixel's topmost particle toward the goal.

    Flow lives on particle position pixels: for every pixel holding at least
    one particle, the highest-layer one (lowest index on ties) defines the
    flow; all other pixels are invalid. This keeps each flow vector anchored
    within half a pixel of a real grasp target.
    """
    if (current.grid_w, current.grid_h) != (goal.grid_w, goal.grid_h):
        raise ShapeMismatch(
            f"grid {current.grid_w}x{current.grid_h} vs "
            f"{goal.grid_w}x{goal.grid_h}")
    idx = _pixel_indices(current.positions, resolution, workspace_m)
    flat = idx[:, 0] * resolution + idx[:, 1]
    n = current.n_particles
    # Last entry per pixel after sorting: max layer, lowest index on ties.
    order = np.lexsort((-np.arange(n), current.layers, flat))
    flat_sorted = flat[order]
    last = np.ones(n, dtype=bool)
    last[:-1] = flat_sorted[1:] != flat_sorted[:-1]
    top = order[last]

    vectors = np.zeros((resolution, resolution, 2))
    valid = np.zeros((resolution, resolution), dtype=bool)
    scale = workspace_m / resolution
    disp = (goal.positions[top] - current.positions[top]) / scale
    vectors[idx[top, 0], idx[top, 1]] = disp
    valid[idx[top, 0], idx[top, 1]] = True
    return FlowField(vectors=vectors, valid=valid)


def epe(f_hat: FlowField, f: FlowField) -> float:
    """Mean endpoint error over the pixels valid in the reference field."""
    if f_hat.resolution != f.resolution:
        raise ShapeMismatch(
            f"resolution {f_hat.resolution} vs {f.resolution}")
    n = int(f.valid.sum())
    if n == 0:
        raise EmptyFlow("reference flow has no valid pixels")
    diff = np.linalg.norm(f_hat.vectors - f.vectors, axis=2)
    return float(diff[f.valid].sum() / n)


def _move_threshold_px(obs: Observation, move_threshold_mm: float) -> float:
    return (move_threshold_mm / 1000.0) / obs.pixel_to_meter


def pick_features(flow: FlowField, obs: Observation) -> np.ndarray:
    """(R, R, N_PICK_FEATURES) feature stack for the logistic scorer."""
    r = flow.resolution
    mag = flow.magnitude() / r
    occupied = obs.occupancy.astype(bool)
    top_layer = int(obs.height[occupied].max()) if occupied.any() else 0
    top_flag = (occupied & (obs.height == top_layer)).astype(np.float64)
    edge_dist = ndimage.distance_transform_edt(occupied) / r
    bias = np.ones((r, r))
    return np.stack([mag, top_flag, edge_dist, bias], axis=2)


def pick_heatmap(scorer: PickScorer, flow: FlowField, obs: Observation,
                 move_threshold_mm: float = DEFAULT_DELTA_MOVE_MM) -> np.ndarray:
    """Per-pixel pick score in [0, 1]; all-zero means nothing worth moving.

    Pixels outside the flow mask or moving less than the movement threshold
    are zeroed for both variants.
    """
    if flow.resolution != obs.resolution:
        raise ShapeMismatch(
            f"flow resolution {flow.resolution} vs "
            f"observation {obs.resolution}")
    mag = flow.magnitude()
    mask = flow.valid & (mag > _move_threshold_px(obs, move_threshold_mm))
    if scorer.variant == SCORER_GEOMETRIC:
        heat = np.where(mask, mag, 0.0)
        peak = heat.max()
        return heat / peak if peak > 0 else heat
    if scorer.variant == SCORER_LOGISTIC:
        if scorer.weights is None:
            raise UnsupportedVariant("trained scorer has no weights")
        logits = pick_features(flow, obs) @ scorer.weights
        heat = 1.0 / (1.0 + np.exp(-logits))
        return np.where(mask, heat, 0.0)
    raise UnsupportedVariant(f"unknown scorer variant {scorer.variant!r}")


def select_pick(heatmap: np.ndarray):
    """Argmax pixel, row-major on ties; None when the heatmap is all zero."""
    if heatmap.max() <= 0.0:
        return None
    return tuple(int(v) for v in
                 np.unravel_index(np.argmax(heatmap), heatmap.shape))


def select_place(flow: FlowField, g):
    """Pick pixel plus its flow vector, rounded and clamped to the image."""
    if not flow.valid[g[0], g[1]]:
        raise InvalidPick(f"pick pixel {g} has no flow")
    r = flow.resolution
    target = np.asarray(g, dtype=np.float64) + flow.vectors[g[0], g[1]]
    p = np.rint(target).astype(int)
    return tuple(int(v) for v in np.clip(p, 0, r - 1))


def pixel_to_point(px, pixel_to_meter: float) -> np.ndarray:
    """Center of a pixel in workspace meters."""
    return (np.asarray(px, dtype=np.float64) + 0.5) * pixel_to_meter


def propose_action(scorer: PickScorer, current: ClothState,
                   subgoal: ClothState,
                   resolution: int = DEFAULT_RESOLUTION,
                   workspace_m: float = DEFAULT_WORKSPACE_M,
                   move_threshold_mm: float = DEFAULT_DELTA_MOVE_MM):
    """Full action inference: flow, heatmap, pick argmax, flow-queried place.

    Returns a FoldAction in workspace meters, or None when no pixel moves
    beyond the threshold (no action needed).
    """
    flow = oracle_flow(current, subgoal, resolution, workspace_m)
    obs = render(current, resolution, workspace_m)
    heat = pick_heatmap(scorer, flow, obs, move_threshold_mm)
    g_px = select_pick(heat)
    if g_px is None:
        return None
    p_px = select_place(flow, g_px)
    return FoldAction(pixel_to_point(g_px, obs.pixel_to_meter),
                      pixel_to_point(p_px, obs.pixel_to_meter))


# ---------------------------------------------------------------------------
# Pick scorer training (binary cross-entropy on blob targets)
# ---------------------------------------------------------------------------

def bce_pick_loss(heatmap: np.ndarray, heatmap_hat: np.ndarray) -> float:
    """Mean pixelwise binary cross-entropy of a predicted heatmap."""
    if heatmap.shape != heatmap_hat.shape:
        raise ShapeMismatch(
            f"heatmap shapes {heatmap.shape} vs {heatmap_hat.shape}")
    p = np.clip(heatmap_hat, _BCE_CLAMP, 1.0 - _BCE_CLAMP)
    return float(-np.mean(heatmap * np.log(p)
                          + (1.0 - heatmap) * np.log(1.0 - p)))


def pick_label_blob(shape, center, sigma_px: float = PICK_LABEL_SIGMA_PX):
    """Gaussian blob target centered on a ground-truth pick pixel."""
    ii, jj = np.indices(shape)
    d2 = (ii - center[0]) ** 2 + (jj - center[1]) ** 2
    return np.exp(-d2 / (2.0 * sigma_px ** 2))


def pick_loss_and_grad(weights: np.ndarray, features: np.ndarray,
                       labels: np.ndarray):
    """Mean BCE of sigmoid(features @ w) against labels, with its gradient.

    features is (n, N_PICK_FEATURES), labels (n,) in [0, 1].
    """
    logits = features @ weights
    p = 1.0 / (1.0 + np.exp(-logits))
    pc = np.clip(p, _BCE_CLAMP, 1.0 - _BCE_CLAMP)
    loss = float(-np.mean(labels * np.log(pc)
                          + (1.0 - labels) * np.log(1.0 - pc)))
    # d(BCE)/dlogit = p - y wherever the clamp is inactive.
    active = (p > _BCE_CLAMP) & (p < 1.0 - _BCE_CLAMP)
    dlogit = np.where(active, p - labels, 0.0) / len(labels)
    return loss, features.T @ dlogit


def _scorer_training_rows(dataset: Dataset, move_threshold_mm):
    xs, ys = [], []
    for t in dataset.tuples:
        if t.a != 1:
            continue
        flow = oracle_flow(t.state0, t.state1, dataset.resolution,
                           dataset.workspace_m)
        mask = flow.valid & (flow.magnitude()
                             > _move_threshold_px(t.obs0, move_threshold_mm))
        if not mask.any():
            continue
        g_px = _pixel_indices(t.u.grasp[None, :], dataset.resolution,
                              dataset.workspace_m)[0]
        labels = pick_label_blob(mask.shape, g_px)
        feats = pick_features(flow, t.obs0)
        xs.append(feats[mask])
        ys.append(labels[mask])
    return xs, ys


def train_pick_scorer(dataset: Dataset,
                      move_threshold_mm: float = DEFAULT_DELTA_MOVE_MM,
                      learning_rate: float = 5.0, epochs: int = 300,
                      seed: int = 0) -> PickScorer:
    """Fit logistic pick weights on the action tuples of a dataset."""
    xs, ys = _scorer_training_rows(dataset, move_threshold_mm)
    if not xs:
        raise InsufficientPairs("no action tuples to train the pick scorer")
    features = np.concatenate(xs)
    labels = np.concatenate(ys)
    rng = np.random.default_rng(seed)
    weights = rng.normal(0.0, 0.01, size=N_PICK_FEATURES)
    for _ in range(epochs):
        _, grad = pick_loss_and_grad(weights, features, labels)
        weights -= learning_rate * grad
    return PickScorer(variant=SCORER_LOGISTIC, weights=weights)


# ---------------------------------------------------------------------------
# Retrieval baseline: nearest stored action pair in latent space
# ---------------------------------------------------------------------------

def apm_baseline_action(enc: EncodedDataset, model: EncoderModel,
                        current: Observation, subgoal: Observation) -> FoldAction:
    """Action of the stored pair nearest to (current, subgoal) in latent space."""
    a1 = np.nonzero(enc.a == 1)[0]
    if a1.size == 0:
        raise InsufficientPairs("dataset has no action pairs")
    z_cur = encode(model, current)
    z_sub = encode(model, subgoal)
    scores = (np.sum((enc.z0[a1] - z_cur) ** 2, axis=1)
              + np.sum((enc.z1[a1] - z_sub) ** 2, axis=1))
    return enc.actions[int(a1[int(np.argmin(scores))])]


# ---------------------------------------------------------------------------
# Inspection exports
# ---------------------------------------------------------------------------

def flow_to_text(flow: FlowField) -> str:
    """Two plain-text grids (dx then dy), one row per x bin."""
    blocks = []
    for c in range(2):
        rows = [" ".join(repr(float(v)) for v in flow.vectors[i, :, c])
                for i in range(flow.resolution)]
        blocks.append("\n".join(rows))
    return "\n\n".join(blocks) + "\n"


def flow_to_pgm(flow: FlowField) -> bytes:
    """Direction-wheel graymap: flow angle maps to intensity, invalid is 0."""
    angle = np.arctan2(flow.vectors[:, :, 1], flow.vectors[:, :, 0])
    gray = np.where(flow.valid,
                    1 + np.round((angle + math.pi) / (2 * math.pi) * 254.0),
                    0).astype(np.uint8)
    header = f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii")
    return header + gray.tobytes()
