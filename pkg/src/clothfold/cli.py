"""Command-line front end.

Subcommands: gen-data, fit-encoder, build-lsr, plan, run, bench, ablate.
Every subcommand accepts --config FILE with plain `key = value` lines;
explicit flags override config values. Output files are written atomically
(temp file, then rename). Exit codes: 0 success, 1 usage error, 2 artifact
or IO error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .datagen import (DEFAULT_DELTA_MOVE_MM, DEFAULT_PERTURB_SCALE_M,
                      build_corpus, goal_library, load_dataset, load_goal,
                      rollout_scripted, save_dataset, save_goal)
from .errors import ArtifactMissing, ClothFoldError, FormatError
from .executor import (ABLATION_GRASP_SIGMA_M, ABLATION_SETTLE_SIGMA_M,
                       DEFAULT_MAX_ITERS, MODES, EpisodeConfig, bench_goal,
                       run_bench, run_episode)
from .flow import PickScorer, train_pick_scorer
from .latent import (build_bank, encode_dataset, fit_encoder, load_model,
                     save_model)
from .roadmap import build_lsr, load_roadmap, save_roadmap, to_dot, tune_epsilon
from .sim import NoiseParams, render


class UsageError(Exception):
    pass


def _require_file(path):
    if not os.path.exists(path):
        raise ArtifactMissing(f"required artifact missing: {path}")
    return path


def _write_atomic(path, data) -> None:
    tmp = f"{path}.tmp"
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def _save_atomic(path, saver) -> None:
    tmp = f"{path}.tmp"
    saver(tmp)
    os.replace(tmp, path)


def read_config(path) -> dict:
    """Plain `key = value` file; # starts a comment, blank lines ignored."""
    config = {}
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            config[key.strip().replace("-", "_")] = value.strip()
    return config


def _apply_config(parser: argparse.ArgumentParser, config: dict) -> None:
    known = {}
    for action in parser._actions:
        if action.dest in ("help", "config"):
            continue
        known[action.dest] = action
    overrides = {}
    for key, value in config.items():
        if key not in known:
            raise UsageError(f"unknown config key {key!r}")
        action = known[key]
        if isinstance(action, (argparse._StoreTrueAction,
                               argparse._StoreFalseAction)):
            overrides[key] = value.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            overrides[key] = action.type(value)
        else:
            overrides[key] = value
    parser.set_defaults(**overrides)


def _parse_tiers(text: str):
    tiers = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, _, hi = part.partition("-")
            tiers.extend(range(int(lo), int(hi) + 1))
        elif part:
            tiers.append(int(part))
    if not tiers or any(t not in (1, 2, 3, 4) for t in tiers):
        raise UsageError(f"bad tier selection {text!r}")
    return tiers


def _parse_modes(text: str):
    modes = [m.strip() for m in text.split(",") if m.strip()]
    for m in modes:
        if m not in MODES:
            raise UsageError(f"unknown mode {m!r}; choose from {MODES}")
    if not modes:
        raise UsageError("no modes selected")
    return modes


def _load_pipeline(args, need_roadmap=True):
    dataset = load_dataset(_require_file(args.dataset))
    model = load_model(_require_file(args.model))
    bank = build_bank(dataset, model)
    enc = encode_dataset(dataset, model)
    rm = None
    if need_roadmap:
        rm = load_roadmap(_require_file(args.roadmap), bank)
    return dataset, model, bank, enc, rm


def _scorer_for(args, dataset) -> PickScorer:
    if getattr(args, "scorer", "geometric") == "trained-logistic":
        return train_pick_scorer(dataset)
    return PickScorer()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_gen_data(args):
    dataset = build_corpus(
        n_variants=args.variants, perturbs_per_state=args.perturbs,
        seed=args.seed, perturb_scale_m=args.perturb_scale,
        delta_move_mm=args.delta_move, grid_w=args.grid, grid_h=args.grid,
        spacing_m=args.spacing, resolution=args.resolution)
    _save_atomic(args.out, lambda p: save_dataset(dataset, p))
    os.makedirs(args.goals_dir, exist_ok=True)
    n_goals = 0
    for tier in (1, 2, 3, 4):
        for variant in range(args.variants):
            script = goal_library(tier, variant, args.grid, args.grid,
                                  args.spacing)
            _, goal_state = rollout_scripted(
                script, args.grid, args.grid, args.spacing,
                resolution=args.resolution)
            path = os.path.join(args.goals_dir, f"tier{tier}_{variant}.json")
            _save_atomic(path, lambda p, s=script, g=goal_state: save_goal(s, g, p))
            n_goals += 1
    print(f"wrote {len(dataset.tuples)} tuples to {args.out} "
          f"and {n_goals} goals to {args.goals_dir}")
    return 0


def _cmd_fit_encoder(args):
    dataset = load_dataset(_require_file(args.dataset))
    model = fit_encoder(dataset, variant=args.variant,
                        latent_dim=args.latent_dim,
                        downsample=args.downsample, alpha=args.alpha,
                        epochs=args.epochs, seed=args.seed)
    _save_atomic(args.out, lambda p: save_model(model, p))
    print(f"fitted {model.variant} encoder (d={model.latent_dim}) "
          f"-> {args.out}")
    return 0


def _cmd_build_lsr(args):
    dataset, model, bank, enc, _ = _load_pipeline(args, need_roadmap=False)
    epsilon = args.epsilon if args.epsilon > 0 else tune_epsilon(enc)
    rm = build_lsr(enc, bank, epsilon)
    _save_atomic(args.out, lambda p: save_roadmap(rm, p))
    if args.dot:
        _write_atomic(args.dot, to_dot(rm))
    print(f"roadmap: {rm.node_count()} nodes, {len(rm.edges)} edges, "
          f"epsilon={epsilon:.6g} -> {args.out}")
    return 0


def _cmd_plan(args):
    dataset, model, bank, enc, rm = _load_pipeline(args)
    if args.start == "flat":
        start_obs = render(dataset.flat_state(), dataset.resolution,
                           dataset.workspace_m)
    else:
        _, start_state = load_goal(_require_file(args.start))
        start_obs = render(start_state, dataset.resolution,
                           dataset.workspace_m)
    _, goal_state = load_goal(_require_file(args.goal))
    goal_obs = render(goal_state, dataset.resolution, dataset.workspace_m)
    from .roadmap import plan as plan_fn
    pl = plan_fn(rm, model, start_obs, goal_obs, args.seed)
    seq = " -> ".join(str(i) for i in pl.node_ids)
    print(f"plan: {seq} (length {pl.length}, "
          f"{pl.n_candidates} shortest candidates)")
    if not pl.start_covered or not pl.goal_covered:
        print("warning: query outside covered states "
              f"(start_covered={pl.start_covered}, "
              f"goal_covered={pl.goal_covered})")
    return 0


def _cmd_run(args):
    dataset, model, bank, enc, rm = _load_pipeline(args)
    _, goal_state = bench_goal(dataset, args.tier, args.goal_seed)
    cfg = EpisodeConfig(
        mode=args.mode, max_iters=args.max_iters,
        tau=None if args.tau < 0 else args.tau,
        noise=NoiseParams(args.grasp_sigma, args.settle_sigma, 0),
        seed=args.seed, replan_path_each_iter=not args.fixed_path)
    result = run_episode(cfg, dataset.flat_state(), goal_state, rm, model,
                         _scorer_for(args, dataset), enc,
                         dataset.workspace_m, dataset.delta_move_mm)
    if args.trace:
        lines = "".join(json.dumps(row, sort_keys=True) + "\n"
                        for row in result.trace)
        _write_atomic(args.trace, lines)
    print(f"tier {args.tier} goal-seed {args.goal_seed} mode {args.mode}: "
          f"{result.n_actions} actions, mpde {result.mpde_mm:.3f} mm, "
          f"miou {result.miou:.3f}, success {result.success}"
          + (f", failure={result.failure}" if result.failure else ""))
    return 0


def _run_bench_common(args, modes, noise):
    dataset, model, bank, enc, rm = _load_pipeline(args)
    report = run_bench(
        dataset, model, rm, _scorer_for(args, dataset), enc,
        tiers=_parse_tiers(args.tiers), seeds_per_tier=args.seeds,
        modes=modes, noise=noise, master_seed=args.master_seed,
        max_iters=args.max_iters)
    _write_atomic(args.out, report.to_csv())
    print(f"wrote {len(report.rows)} rows to {args.out}")
    print(report.summary_text(), end="")
    return 0


def _cmd_bench(args):
    noise = NoiseParams(args.grasp_sigma, args.settle_sigma, 0)
    return _run_bench_common(args, _parse_modes(args.modes), noise)


def _cmd_ablate(args):
    noise = NoiseParams(args.grasp_sigma, args.settle_sigma, 0)
    return _run_bench_common(args, list(MODES), noise)


# ---------------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------------

def _add_artifact_flags(p, roadmap=True):
    p.add_argument("--dataset", default="dataset.jsonl",
                   help="transition corpus file")
    p.add_argument("--model", default="encoder.json", help="encoder file")
    if roadmap:
        p.add_argument("--roadmap", default="roadmap.json",
                       help="roadmap file")
    p.add_argument("--scorer", default="geometric",
                   choices=["geometric", "trained-logistic"],
                   help="pick scorer variant")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="clothfold",
        description="Fabric folding pipeline: data, encoder, roadmap, "
                    "episodes, benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--config", default=None,
                       help="key = value file; flags override")
        p.set_defaults(fn=fn)
        subparsers[name] = p
        return p

    p = add("gen-data", _cmd_gen_data, help="generate the transition corpus")
    p.add_argument("--out", default="dataset.jsonl")
    p.add_argument("--goals-dir", default="goals")
    p.add_argument("--variants", type=int, default=4)
    p.add_argument("--perturbs", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=24)
    p.add_argument("--spacing", type=float, default=0.01)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--delta-move", type=float, default=DEFAULT_DELTA_MOVE_MM)
    p.add_argument("--perturb-scale", type=float,
                   default=DEFAULT_PERTURB_SCALE_M)

    p = add("fit-encoder", _cmd_fit_encoder, help="fit the latent encoder")
    p.add_argument("--dataset", default="dataset.jsonl")
    p.add_argument("--out", default="encoder.json")
    p.add_argument("--variant", default="fitted-pca",
                   choices=["fitted-pca", "linear-vae"])
    p.add_argument("--latent-dim", type=int, default=8)
    p.add_argument("--downsample", type=int, default=16)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)

    p = add("build-lsr", _cmd_build_lsr, help="cluster the latent roadmap")
    _add_artifact_flags(p, roadmap=False)
    p.add_argument("--out", default="roadmap.json")
    p.add_argument("--epsilon", type=float, default=0.0,
                   help="clustering radius; <= 0 tunes it from the corpus")
    p.add_argument("--dot", default=None, help="also write a DOT graph")

    p = add("plan", _cmd_plan, help="print a shortest folding plan")
    _add_artifact_flags(p)
    p.add_argument("--start", default="flat",
                   help="'flat' or a goal/state json file")
    p.add_argument("--goal", required=True, help="goal json file")
    p.add_argument("--seed", type=int, default=0)

    p = add("run", _cmd_run, help="run one episode")
    _add_artifact_flags(p)
    p.add_argument("--tier", type=int, default=1)
    p.add_argument("--goal-seed", type=int, default=0)
    p.add_argument("--mode", default="defnet", choices=list(MODES))
    p.add_argument("--max-iters", type=int, default=DEFAULT_MAX_ITERS)
    p.add_argument("--tau", type=float, default=-1.0,
                   help="success threshold; < 0 uses epsilon/2")
    p.add_argument("--grasp-sigma", type=float, default=0.0)
    p.add_argument("--settle-sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fixed-path", action="store_true",
                   help="keep the first sampled shortest path all episode")
    p.add_argument("--trace", default=None, help="write per-action JSONL")

    for name, fn, grasp, settle in (
            ("bench", _cmd_bench, 0.0, 0.0),
            ("ablate", _cmd_ablate, ABLATION_GRASP_SIGMA_M,
             ABLATION_SETTLE_SIGMA_M)):
        p = add(name, fn, help="episode benchmark over (tier, seed, mode)"
                if name == "bench" else "noisy benchmark over all modes")
        _add_artifact_flags(p)
        p.add_argument("--tiers", default="1-4")
        p.add_argument("--seeds", type=int, default=10)
        if name == "bench":
            p.add_argument("--modes", default="defnet")
        p.add_argument("--out", default=f"{name}.csv")
        p.add_argument("--master-seed", type=int, default=0)
        p.add_argument("--max-iters", type=int, default=DEFAULT_MAX_ITERS)
        p.add_argument("--grasp-sigma", type=float, default=grasp)
        p.add_argument("--settle-sigma", type=float, default=settle)

    return parser, subparsers


def _find_config(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def cli_main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = _build_parser()
    try:
        config_path = _find_config(argv)
        if config_path is not None and argv and argv[0] in subparsers:
            config = read_config(_require_file(config_path))
            _apply_config(subparsers[argv[0]], config)
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ArtifactMissing, FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ClothFoldError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
