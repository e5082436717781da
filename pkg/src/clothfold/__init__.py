"""Desk-scale fabric folding: cloth simulation, latent roadmap planning,
flow-based action inference, and a closed-loop benchmark harness."""

from .datagen import (Dataset, FoldScript, TransitionTuple, build_corpus,
                      goal_library, load_dataset, make_no_action_pair,
                      rollout_scripted, save_dataset, transition_graph)
from .errors import ClothFoldError
from .executor import (BenchReport, EpisodeConfig, EpisodeResult, run_bench,
                       run_episode)
from .flow import (FlowField, PickScorer, apm_baseline_action, bce_pick_loss,
                   epe, oracle_flow, pick_heatmap, propose_action,
                   select_pick, select_place, train_pick_scorer)
from .latent import (EncodedDataset, EncoderModel, build_bank, decode, encode,
                     encode_dataset, fit_encoder, gradient_check, load_model,
                     loss_action, loss_combined, loss_vae, save_model)
from .roadmap import (Plan, Roadmap, all_shortest_paths, build_lsr,
                      load_roadmap, map_to_node, plan, save_roadmap,
                      tune_epsilon)
from .sim import (ClothState, FoldAction, NoiseParams, Observation,
                  apply_fold, mask_iou, max_particle_movement,
                  mean_particle_distance, new_flat_cloth, render, save_pgm)

__all__ = [name for name in dir() if not name.startswith("_")]
