"""Training-corpus generation: scripted fold rollouts and no-action pairs.

Folds are restricted to a small grammar so that rollouts revisit a finite set
of states: half folds of the current rectangular footprint (fraction 1/2),
quarter folds (fraction 1/4), and the four diagonal corner folds of a square
footprint. Every transition record carries the full particle states of both
endpoints; observations are regenerated from states when a dataset is loaded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidTier, PerturbTooLarge
from .sim import (DEFAULT_GRID, DEFAULT_SPACING_M,
                  DEFAULT_THICKNESS_M, DEFAULT_WORKSPACE_M, ClothState,
                  FoldAction, NoiseParams, Observation, apply_fold,
                  max_particle_movement, new_flat_cloth, render,
                  snap_to_pixel_center)

DEFAULT_DELTA_MOVE_MM = 15.0
# Corpus/benchmark images are rendered finer than the base render default so
# pick/place pixel quantization (half a pixel) sits below execution noise.
DEFAULT_CORPUS_RESOLUTION = 128
# Keeps no-action latent jitter well below the smallest action-pair distance.
DEFAULT_PERTURB_SCALE_M = 0.0003
# Execution uncertainty of the data-collection robot: corpus states are what
# noisy grasp-and-place actions actually produced, not ideal fold geometry.
DEFAULT_COLLECT_GRASP_SIGMA_M = 0.003
DEFAULT_COLLECT_SETTLE_SIGMA_M = 0.0005

DATASET_VERSION = 1
GOAL_VERSION = 1

# Script library: per tier, a fixed list of fold-step sequences. A step folds
# the current rectangular footprint; "half:x:low" reflects the low-x half onto
# the high-x half, "diag:bl" folds the bottom-left corner onto the top-right.
# Variants are arranged so every distinct intermediate or goal state has a
# distinct footprint: states that differed only in stacking order would be
# near-indistinguishable to a coarse encoder.
_TIER1 = [
    ["half:x:low"],
    ["half:y:low"],
    ["diag:bl"],
    ["half:y:high"],
]
_TIER2 = [
    ["half:x:low", "half:y:low"],
    ["half:x:low", "half:x:low"],
    ["half:y:high", "half:y:high"],
    ["half:x:high", "half:x:high"],
]
_TIER3 = [s + [extra] for s, extra in
          zip(_TIER2, ["half:x:low", "half:y:high", "half:x:high", "half:y:low"])]
_TIER4 = [s + [extra] for s, extra in
          zip(_TIER3, ["half:y:low", "half:y:high", "half:x:high", "half:y:low"])]
_LIBRARY = {1: _TIER1, 2: _TIER2, 3: _TIER3, 4: _TIER4}


def derive_seed(*parts: int) -> int:
    """Stable integer seed from a tuple of integers."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass
class TransitionTuple:
    """One before/after record: observations, states, and the action label.

    a = 1 marks real fabric movement (max particle movement beyond the
    delta_move threshold); a = 0 marks two observations of the same state.
    """

    obs0: Observation
    obs1: Observation
    state0: ClothState
    state1: ClothState
    a: int
    u: FoldAction


@dataclass
class FoldScript:
    """A tier's goal recipe: an ordered list of grammar folds."""

    tier: int
    variant: int
    steps: list
    actions: list

    def __post_init__(self):
        if self.tier not in (1, 2, 3, 4):
            raise InvalidTier(f"tier must be in 1..4, got {self.tier}")
        if len(self.actions) != self.tier or len(self.steps) != self.tier:
            raise InvalidTier(
                f"tier {self.tier} script must have {self.tier} folds, "
                f"got {len(self.actions)}")


@dataclass
class Dataset:
    """Transition corpus plus the cloth/render configuration it came from."""

    tuples: list
    delta_move_mm: float
    grid_w: int
    grid_h: int
    spacing_m: float
    thickness_m: float
    workspace_m: float
    resolution: int
    seed: int
    meta: dict = field(default_factory=dict)

    def flat_state(self) -> ClothState:
        return new_flat_cloth(self.grid_w, self.grid_h, self.spacing_m,
                              self.thickness_m, self.workspace_m)


def _cloth_bbox(grid_w, grid_h, spacing_m, workspace_m):
    span_x = (grid_w - 1) * spacing_m
    span_y = (grid_h - 1) * spacing_m
    x0 = (workspace_m - span_x) / 2.0
    y0 = (workspace_m - span_y) / 2.0
    return x0, x0 + span_x, y0, y0 + span_y


def _step_action(step: str, rect):
    """FoldAction for one grammar step, plus the footprint rect after it."""
    x0, x1, y0, y1 = rect
    xm, ym = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    kind, _, spec = step.partition(":")
    if kind == "half":
        axis, _, side = spec.partition(":")
        if axis == "x":
            if side == "low":
                return FoldAction((x0, ym), (x1, ym)), (xm, x1, y0, y1)
            return FoldAction((x1, ym), (x0, ym)), (x0, xm, y0, y1)
        if side == "low":
            return FoldAction((xm, y0), (xm, y1)), (x0, x1, ym, y1)
        return FoldAction((xm, y1), (xm, y0)), (x0, x1, y0, ym)
    if kind == "quarter":
        axis, _, side = spec.partition(":")
        if axis == "x":
            if side == "low":
                return FoldAction((x0, ym), (xm, ym)), (x0 + (x1 - x0) / 4, x1, y0, y1)
            return FoldAction((x1, ym), (xm, ym)), (x0, x1 - (x1 - x0) / 4, y0, y1)
        if side == "low":
            return FoldAction((xm, y0), (xm, ym)), (x0, x1, y0 + (y1 - y0) / 4, y1)
        return FoldAction((xm, y1), (xm, ym)), (x0, x1, y0, y1 - (y1 - y0) / 4)
    if kind == "diag":
        corners = {"bl": ((x0, y0), (x1, y1)), "br": ((x1, y0), (x0, y1)),
                   "tl": ((x0, y1), (x1, y0)), "tr": ((x1, y1), (x0, y0))}
        g, p = corners[spec]
        return FoldAction(g, p), rect
    raise InvalidTier(f"unknown grammar step {step!r}")


def goal_library(tier: int, variant_seed: int,
                 grid_w: int = DEFAULT_GRID, grid_h: int = DEFAULT_GRID,
                 spacing_m: float = DEFAULT_SPACING_M,
                 workspace_m: float = DEFAULT_WORKSPACE_M) -> FoldScript:
    """Deterministic goal script for a task tier.

    variant_seed indexes the per-tier script list (modulo its size), so any
    seed yields a valid goal and seeds 0..3 enumerate all variants.
    """
    if tier not in _LIBRARY:
        raise InvalidTier(f"tier must be in 1..4, got {tier}")
    scripts = _LIBRARY[tier]
    variant = int(variant_seed) % len(scripts)
    steps = scripts[variant]
    rect = _cloth_bbox(grid_w, grid_h, spacing_m, workspace_m)
    actions = []
    for step in steps:
        action, rect = _step_action(step, rect)
        actions.append(action)
    return FoldScript(tier=tier, variant=variant, steps=list(steps),
                      actions=actions)


def rollout_scripted(script: FoldScript,
                     grid_w: int = DEFAULT_GRID, grid_h: int = DEFAULT_GRID,
                     spacing_m: float = DEFAULT_SPACING_M,
                     thickness_m: float = DEFAULT_THICKNESS_M,
                     workspace_m: float = DEFAULT_WORKSPACE_M,
                     resolution: int = DEFAULT_CORPUS_RESOLUTION):
    """Execute a script noise-free from the flat state.

    Returns (tuples, goal_state): one a=1 transition per fold and the final
    state reached. Recorded grasp/place coordinates are quantized to image
    pixel centers, matching what a camera-based collection pipeline stores;
    execution itself uses the exact script actions.
    """
    state = new_flat_cloth(grid_w, grid_h, spacing_m, thickness_m, workspace_m)
    tuples = []
    for action in script.actions:
        nxt, executed = apply_fold(state, action, workspace_m=workspace_m)
        if not executed:
            raise RuntimeError(f"script fold {action} missed the cloth")
        recorded = FoldAction(
            snap_to_pixel_center(action.grasp, resolution, workspace_m),
            snap_to_pixel_center(action.place, resolution, workspace_m))
        tuples.append(TransitionTuple(
            obs0=render(state, resolution, workspace_m),
            obs1=render(nxt, resolution, workspace_m),
            state0=state, state1=nxt, a=1, u=recorded))
        state = nxt
    return tuples, state


def make_no_action_pair(state: ClothState, perturb_scale_m: float, seed: int,
                        delta_move_mm: float = DEFAULT_DELTA_MOVE_MM,
                        resolution: int = DEFAULT_CORPUS_RESOLUTION,
                        workspace_m: float = DEFAULT_WORKSPACE_M,
                        max_resamples: int = 100) -> TransitionTuple:
    """a=0 pair: the state against a slightly jittered copy of itself.

    Jitter is i.i.d. planar Gaussian on every particle, rejection-resampled
    until the max induced movement stays within delta_move.
    """
    rng = np.random.default_rng(seed)
    n = state.n_particles
    for _ in range(max_resamples):
        jitter = rng.normal(0.0, perturb_scale_m, size=(n, 2))
        if np.linalg.norm(jitter, axis=1).max() * 1000.0 <= delta_move_mm:
            break
    else:
        raise PerturbTooLarge(
            f"perturb_scale_m={perturb_scale_m} cannot stay within "
            f"{delta_move_mm} mm after {max_resamples} resamples")
    perturbed = ClothState(
        grid_w=state.grid_w, grid_h=state.grid_h,
        positions=state.positions + jitter, layers=state.layers,
        spacing_m=state.spacing_m, thickness_m=state.thickness_m)
    centroid = state.positions.mean(axis=0)
    return TransitionTuple(
        obs0=render(state, resolution, workspace_m),
        obs1=render(perturbed, resolution, workspace_m),
        state0=state, state1=perturbed, a=0,
        u=FoldAction(centroid, centroid))


def build_corpus(n_variants: int = 4, perturbs_per_state: int = 2,
                 seed: int = 0,
                 perturb_scale_m: float = DEFAULT_PERTURB_SCALE_M,
                 delta_move_mm: float = DEFAULT_DELTA_MOVE_MM,
                 collect_grasp_sigma_m: float = DEFAULT_COLLECT_GRASP_SIGMA_M,
                 collect_settle_sigma_m: float = DEFAULT_COLLECT_SETTLE_SIGMA_M,
                 grid_w: int = DEFAULT_GRID, grid_h: int = DEFAULT_GRID,
                 spacing_m: float = DEFAULT_SPACING_M,
                 thickness_m: float = DEFAULT_THICKNESS_M,
                 workspace_m: float = DEFAULT_WORKSPACE_M,
                 resolution: int = DEFAULT_CORPUS_RESOLUTION) -> Dataset:
    """Noisily executed scripted rollouts plus no-action pairs.

    Scripts are walked as a prefix tree: each distinct fold sequence is
    executed once (with grasp/settle collection noise), so scripts sharing a
    prefix revisit the identical stored state. Every script still contributes
    one a=1 tuple per fold (shared prefixes yield duplicate tuples), and each
    distinct visited state contributes perturbs_per_state a=0 tuples. Fully
    deterministic given the seed.
    """
    if n_variants < 1:
        raise InvalidTier(f"n_variants must be >= 1, got {n_variants}")
    flat = new_flat_cloth(grid_w, grid_h, spacing_m, thickness_m, workspace_m)
    tree = {(): (flat, None)}  # fold-sequence prefix -> (state, recorded u)
    n_edges = 0
    tuples = []
    for tier in (1, 2, 3, 4):
        for variant in range(n_variants):
            script = goal_library(tier, variant, grid_w, grid_h,
                                  spacing_m, workspace_m)
            prefix = ()
            rect = _cloth_bbox(grid_w, grid_h, spacing_m, workspace_m)
            for step in script.steps:
                action, rect = _step_action(step, rect)
                parent, _ = tree[prefix]
                child_prefix = prefix + (step,)
                if child_prefix not in tree:
                    rng = np.random.default_rng(
                        derive_seed(seed, 1201, n_edges))
                    grasp = action.grasp
                    if collect_grasp_sigma_m > 0:
                        grasp = grasp + rng.normal(
                            0.0, collect_grasp_sigma_m, size=2)
                    executed_action = FoldAction(grasp, action.place)
                    settle = NoiseParams(0.0, collect_settle_sigma_m,
                                         derive_seed(seed, 1202, n_edges))
                    child, executed = apply_fold(parent, executed_action,
                                                 settle, workspace_m)
                    if not executed:
                        raise RuntimeError(
                            f"collection fold {step!r} missed the cloth")
                    recorded = FoldAction(
                        snap_to_pixel_center(grasp, resolution, workspace_m),
                        snap_to_pixel_center(action.place, resolution,
                                             workspace_m))
                    tree[child_prefix] = (child, recorded)
                    n_edges += 1
                child, recorded = tree[child_prefix]
                tuples.append(TransitionTuple(
                    obs0=render(parent, resolution, workspace_m),
                    obs1=render(child, resolution, workspace_m),
                    state0=parent, state1=child, a=1, u=recorded))
                prefix = child_prefix
    distinct = {}  # obs key -> state, first-visit order
    for t in tuples:
        for obs, st in ((t.obs0, t.state0), (t.obs1, t.state1)):
            distinct.setdefault(obs.key(), st)
    for idx, state in enumerate(distinct.values()):
        for j in range(perturbs_per_state):
            tuples.append(make_no_action_pair(
                state, perturb_scale_m, derive_seed(seed, 7919, idx, j),
                delta_move_mm, resolution, workspace_m))
    return Dataset(
        tuples=tuples, delta_move_mm=delta_move_mm,
        grid_w=grid_w, grid_h=grid_h, spacing_m=spacing_m,
        thickness_m=thickness_m, workspace_m=workspace_m,
        resolution=resolution, seed=seed,
        meta={"n_variants": n_variants,
              "perturbs_per_state": perturbs_per_state,
              "perturb_scale_m": perturb_scale_m,
              "collect_grasp_sigma_m": collect_grasp_sigma_m,
              "collect_settle_sigma_m": collect_settle_sigma_m,
              "n_distinct_states": len(distinct)})


def transition_graph(dataset: Dataset):
    """Ground-truth state graph implied by the corpus, from raw observations.

    Observationally identical endpoints are one state; a=0 pairs glue each
    perturbed observation to its source. Returns (classes, edges) where
    classes is a list of frozensets of observation keys (first-visit order)
    and edges is a set of directed (class_index, class_index) pairs witnessed
    by a=1 tuples. Independent of any latent encoding.
    """
    keys = []
    index = {}

    def key_id(obs):
        k = obs.key()
        if k not in index:
            index[k] = len(keys)
            keys.append(k)
        return index[k]

    parent = {}

    def find(i):
        while parent.setdefault(i, i) != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    pairs = [(key_id(t.obs0), key_id(t.obs1), t.a) for t in dataset.tuples]
    for i, j, a in pairs:
        if a == 0:
            union(i, j)
    members = {}
    for i in range(len(keys)):
        members.setdefault(find(i), []).append(i)
    roots = sorted(members, key=lambda r: min(members[r]))
    class_of_key = {}
    classes = []
    for ci, r in enumerate(roots):
        classes.append(frozenset(keys[i] for i in members[r]))
        for i in members[r]:
            class_of_key[i] = ci
    edges = set()
    for i, j, a in pairs:
        if a == 1:
            edges.add((class_of_key[find(i)], class_of_key[find(j)]))
    return classes, edges


# ---------------------------------------------------------------------------
# Persistence: JSON-lines, one tuple per line, observations regenerated.
# ---------------------------------------------------------------------------

def _tuple_to_record(t: TransitionTuple) -> dict:
    return {"state0": t.state0.to_dict(), "state1": t.state1.to_dict(),
            "a": int(t.a), "u": t.u.to_dict()}


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        header = {"version": DATASET_VERSION,
                  "cloth": {"grid_w": dataset.grid_w,
                            "grid_h": dataset.grid_h,
                            "spacing_m": dataset.spacing_m,
                            "thickness_m": dataset.thickness_m},
                  "workspace_m": dataset.workspace_m,
                  "resolution": dataset.resolution,
                  "delta_move_mm": dataset.delta_move_mm,
                  "seed": dataset.seed,
                  "meta": dataset.meta}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for t in dataset.tuples:
            fh.write(json.dumps(_tuple_to_record(t), sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty dataset file")

    def parse(lineno, text):
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}:{lineno}: offset {e.pos}: {e.msg}") from e

    header = parse(1, lines[0])
    version = header.get("version")
    if version != DATASET_VERSION:
        raise FormatError(
            f"{path}:1: unsupported dataset version {version!r}, "
            f"expected {DATASET_VERSION}")
    try:
        cloth = header["cloth"]
        workspace_m = float(header["workspace_m"])
        resolution = int(header["resolution"])
        delta_move_mm = float(header["delta_move_mm"])
        seed = int(header["seed"])
    except KeyError as e:
        raise FormatError(f"{path}:1: missing header field {e}") from e
    tuples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        rec = parse(lineno, line)
        try:
            s0 = ClothState.from_dict(rec["state0"])
            s1 = ClothState.from_dict(rec["state1"])
            a = int(rec["a"])
            u = FoldAction.from_dict(rec["u"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}:{lineno}: bad tuple record: {e}") from e
        tuples.append(TransitionTuple(
            obs0=render(s0, resolution, workspace_m),
            obs1=render(s1, resolution, workspace_m),
            state0=s0, state1=s1, a=a, u=u))
    return Dataset(
        tuples=tuples, delta_move_mm=delta_move_mm,
        grid_w=int(cloth["grid_w"]), grid_h=int(cloth["grid_h"]),
        spacing_m=float(cloth["spacing_m"]),
        thickness_m=float(cloth["thickness_m"]),
        workspace_m=workspace_m, resolution=resolution, seed=seed,
        meta=dict(header.get("meta", {})))


def save_goal(script: FoldScript, goal_state: ClothState, path) -> None:
    record = {"version": GOAL_VERSION, "tier": script.tier,
              "variant": script.variant, "steps": script.steps,
              "actions": [a.to_dict() for a in script.actions],
              "state": goal_state.to_dict()}
    with open(path, "w", encoding="ascii") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_goal(path):
    """Returns (FoldScript, goal ClothState) from a goal file."""
    with open(path, "r", encoding="ascii") as fh:
        try:
            record = json.loads(fh.read())
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: offset {e.pos}: {e.msg}") from e
    version = record.get("version")
    if version != GOAL_VERSION:
        raise FormatError(f"{path}: unsupported goal version {version!r}, "
                          f"expected {GOAL_VERSION}")
    script = FoldScript(
        tier=int(record["tier"]), variant=int(record["variant"]),
        steps=list(record["steps"]),
        actions=[FoldAction.from_dict(a) for a in record["actions"]])
    return script, ClothState.from_dict(record["state"])
