"""Closed-loop episode execution, ablation variants, and the tiered
benchmark harness.

Episode modes:
  defnet            replan from the live observation after every action and
                    act toward the first planned sub-goal (closed loop)
  no_iim            plan once from the initial observation, precompute every
                    action from consecutive planned states, execute open loop
  single_step_flow  no planning: act on flow straight toward the final goal
  apm               closed loop like defnet, but actions come from the
                    nearest stored latent pair instead of the flow

Noise seeds derive from (episode seed, iteration) only, so paired runs of
different modes draw identical execution noise for their k-th action.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datagen import (DEFAULT_DELTA_MOVE_MM, Dataset, derive_seed,
                      goal_library, rollout_scripted)
from .errors import NoPath
from .flow import PickScorer, apm_baseline_action, propose_action
from .latent import EncodedDataset, EncoderModel, encode
from .roadmap import Roadmap, map_to_node, plan
from .sim import (DEFAULT_WORKSPACE_M, ClothState, FoldAction, NoiseParams,
                  Observation, apply_fold, mask_iou, mean_particle_distance,
                  render)

MODES = ("defnet", "no_iim", "single_step_flow", "apm")

DEFAULT_MAX_ITERS = 8
ABLATION_GRASP_SIGMA_M = 0.005
ABLATION_SETTLE_SIGMA_M = 0.001

# Action proposals must clear the deviation one noisy fold reintroduces
# (about twice the grasp error), or the executor chases its own noise.
ACTION_NOISE_FACTOR = 5.0

CSV_HEADER = "tier,seed,mode,mpde_mm,miou,n_actions,success"

_PATH_STREAM = 101
_NOISE_STREAM = 202


@dataclass
class EpisodeConfig:
    mode: str = "defnet"
    max_iters: int = DEFAULT_MAX_ITERS
    tau: float | None = None  # None resolves to roadmap epsilon / 2
    noise: NoiseParams = field(default_factory=NoiseParams)
    seed: int = 0
    replan_path_each_iter: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tau is not None and self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")


@dataclass
class EpisodeResult:
    actions: list  # attempted FoldActions, grasp misses included
    noise_params: list  # NoiseParams per attempted action
    executed: list  # bool per attempted action
    final_state: ClothState
    mpde_mm: float
    miou: float
    n_actions: int
    success: bool
    trace: list  # one dict per attempted action
    failure: str | None = None


def _iteration_noise(cfg: EpisodeConfig, iteration: int) -> NoiseParams:
    return NoiseParams(cfg.noise.grasp_sigma_m, cfg.noise.settle_sigma_m,
                       derive_seed(cfg.seed, _NOISE_STREAM, iteration))


def _path_seed(cfg: EpisodeConfig, iteration: int) -> int:
    it = iteration if cfg.replan_path_each_iter else 0
    return derive_seed(cfg.seed, _PATH_STREAM, it)


def run_episode(cfg: EpisodeConfig, start: ClothState, goal: ClothState,
                rm: Roadmap, model: EncoderModel, scorer: PickScorer,
                enc: EncodedDataset | None = None,
                workspace_m: float = DEFAULT_WORKSPACE_M,
                move_threshold_mm: float = DEFAULT_DELTA_MOVE_MM) -> EpisodeResult:
    """Drive the cloth from start toward goal under one episode mode."""
    if cfg.mode == "apm" and enc is None:
        raise ValueError("apm mode needs the encoded dataset")
    resolution = model.resolution
    tau = rm.epsilon / 2.0 if cfg.tau is None else cfg.tau
    act_threshold_mm = max(move_threshold_mm,
                           ACTION_NOISE_FACTOR * cfg.noise.grasp_sigma_m * 1000.0)
    goal_obs = render(goal, resolution, workspace_m)
    goal_node, _ = map_to_node(rm, encode(model, goal_obs))
    goal_centroid = rm.nodes[goal_node].centroid

    def observe(state):
        obs = render(state, resolution, workspace_m)
        z = encode(model, obs)
        node, covered = map_to_node(rm, z)
        return obs, node, covered, float(np.linalg.norm(z - goal_centroid))

    current = start
    actions, noises, executed_flags, trace = [], [], [], []
    failure = None

    def attempt(action, iteration, extra):
        nonlocal current
        nz = _iteration_noise(cfg, iteration)
        current, executed = apply_fold(current, action, nz, workspace_m)
        actions.append(action)
        noises.append(nz)
        executed_flags.append(executed)
        trace.append(dict(extra, iteration=iteration,
                          grasp=[float(v) for v in action.grasp],
                          place=[float(v) for v in action.place],
                          noise_seed=nz.seed, executed=executed))

    if cfg.mode in ("defnet", "apm"):
        for it in range(cfg.max_iters):
            obs, node, covered, dist = observe(current)
            if node == goal_node or dist <= tau:
                break
            try:
                pl = plan(rm, model, obs, goal_obs, _path_seed(cfg, it))
            except NoPath:
                failure = "no_path"
                break
            if pl.length >= 2:
                sub_state = pl.interior_states[0]
                sub_obs = None
            else:
                sub_state = goal
                sub_obs = goal_obs
            if cfg.mode == "apm":
                if sub_obs is None:
                    sub_obs = render(sub_state, resolution, workspace_m)
                action = apm_baseline_action(enc, model, obs, sub_obs)
            else:
                action = propose_action(scorer, current, sub_state,
                                        resolution, workspace_m,
                                        act_threshold_mm)
                if action is None:
                    failure = "stalled"
                    break
            attempt(action, it, {"node": node, "covered": covered,
                                 "dist": dist, "plan": list(pl.node_ids),
                                 "plan_choice": pl.path_index,
                                 "plan_candidates": pl.n_candidates})
    elif cfg.mode == "no_iim":
        obs0 = render(start, resolution, workspace_m)
        try:
            pl = plan(rm, model, obs0, goal_obs, _path_seed(cfg, 0))
        except NoPath:
            pl = None
            failure = "no_path"
        if pl is not None:
            chain = [start] + list(pl.interior_states)
            chain.append(goal)
            precomputed = []
            for i in range(pl.length):
                a = propose_action(scorer, chain[i], chain[i + 1], resolution,
                                   workspace_m, act_threshold_mm)
                if a is not None:
                    precomputed.append(a)
            for it, action in enumerate(precomputed[:cfg.max_iters]):
                attempt(action, it, {"plan": list(pl.node_ids),
                                     "planned_step": it})
    elif cfg.mode == "single_step_flow":
        for it in range(cfg.max_iters):
            action = propose_action(scorer, current, goal, resolution,
                                    workspace_m, act_threshold_mm)
            if action is None:
                break
            attempt(action, it, {})

    final_obs, final_node, _, final_dist = observe(current)
    success = failure is None and (final_node == goal_node or final_dist <= tau)
    return EpisodeResult(
        actions=actions, noise_params=noises, executed=executed_flags,
        final_state=current,
        mpde_mm=mean_particle_distance(current, goal),
        miou=mask_iou(final_obs, goal_obs),
        n_actions=len(actions), success=success, trace=trace,
        failure=failure)


def replay_actions(start: ClothState, actions, noise_params,
                   workspace_m: float = DEFAULT_WORKSPACE_M) -> ClothState:
    """Re-execute a recorded action sequence with its recorded noise."""
    state = start
    for action, nz in zip(actions, noise_params):
        state, _ = apply_fold(state, action, nz, workspace_m)
    return state


# ---------------------------------------------------------------------------
# Benchmark harness
# ---------------------------------------------------------------------------

@dataclass
class BenchRow:
    tier: int
    seed: int
    mode: str
    mpde_mm: float
    miou: float
    n_actions: int
    success: bool


@dataclass
class BenchReport:
    rows: list

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for r in self.rows:
            lines.append(f"{r.tier},{r.seed},{r.mode},{r.mpde_mm!r},"
                         f"{r.miou!r},{r.n_actions},{int(r.success)}")
        return "\n".join(lines) + "\n"

    def aggregates(self) -> dict:
        """(tier, mode) -> dict with mean/std mpde and miou, action mean."""
        groups = {}
        for r in self.rows:
            groups.setdefault((r.tier, r.mode), []).append(r)
        out = {}
        for key in sorted(groups):
            rows = groups[key]
            mpde = np.asarray([r.mpde_mm for r in rows])
            miou = np.asarray([r.miou for r in rows])
            acts = np.asarray([r.n_actions for r in rows])
            out[key] = {
                "n": len(rows),
                "mpde_mean": float(mpde.mean()),
                "mpde_std": float(mpde.std()),
                "miou_mean": float(miou.mean()),
                "actions_mean": float(acts.mean()),
                "success_rate": float(np.mean([r.success for r in rows])),
            }
        return out

    def summary_text(self) -> str:
        lines = ["tier mode              n  mpde_mm(mean+-std)  miou  "
                 "actions  success"]
        for (tier, mode), agg in self.aggregates().items():
            lines.append(
                f"{tier:4d} {mode:16s} {agg['n']:2d}  "
                f"{agg['mpde_mean']:8.3f}+-{agg['mpde_std']:<7.3f} "
                f"{agg['miou_mean']:5.3f}  {agg['actions_mean']:7.2f}  "
                f"{agg['success_rate']:7.2f}")
        return "\n".join(lines) + "\n"


def bench_goal(dataset: Dataset, tier: int, seed: int):
    """Goal script and its noise-free final state for one benchmark episode."""
    script = goal_library(tier, seed, dataset.grid_w, dataset.grid_h,
                          dataset.spacing_m, dataset.workspace_m)
    _, goal_state = rollout_scripted(
        script, dataset.grid_w, dataset.grid_h, dataset.spacing_m,
        dataset.thickness_m, dataset.workspace_m, dataset.resolution)
    return script, goal_state


def run_bench(dataset: Dataset, model: EncoderModel, rm: Roadmap,
              scorer: PickScorer, enc: EncodedDataset | None,
              tiers, seeds_per_tier: int, modes,
              noise: NoiseParams | None = None, master_seed: int = 0,
              max_iters: int = DEFAULT_MAX_ITERS, tau: float | None = None,
              replan_path_each_iter: bool = True) -> BenchReport:
    """Episode cross product over (tier, seed, mode), deterministic rows.

    Each seed picks the tier's goal variant and the execution noise stream;
    the noise stream ignores the mode so runs pair across modes.
    """
    noise = noise or NoiseParams()
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
    start = dataset.flat_state()
    rows = []
    for tier in tiers:
        for seed in range(seeds_per_tier):
            _, goal_state = bench_goal(dataset, tier, seed)
            episode_seed = derive_seed(master_seed, tier, seed)
            for mode in modes:
                cfg = EpisodeConfig(
                    mode=mode, max_iters=max_iters, tau=tau,
                    noise=NoiseParams(noise.grasp_sigma_m,
                                      noise.settle_sigma_m, 0),
                    seed=episode_seed,
                    replan_path_each_iter=replan_path_each_iter)
                result = run_episode(cfg, start, goal_state, rm, model,
                                     scorer, enc, dataset.workspace_m,
                                     dataset.delta_move_mm)
                rows.append(BenchRow(
                    tier=tier, seed=seed, mode=mode, mpde_mm=result.mpde_mm,
                    miou=result.miou, n_actions=result.n_actions,
                    success=result.success))
    rows.sort(key=lambda r: (r.tier, r.seed, r.mode))
    return BenchReport(rows=rows)
