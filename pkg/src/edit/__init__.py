"""Elastic diffusion transformer at desk scale: a tiny rectified-flow DiT
whose blocks learn to skip themselves and shrink their MLPs, plus a caching
sampler that turns those decisions into measured FLOP savings."""

from .tensor import (Tensor, no_grad, backward, grad_check, GradCheckReport,
                     ShapeError, DomainError, ContractError, NumericError)
from .flow import SynthConfig, FlowSample, gen_batch, trajectory_point, fm_loss, euler_sample
from .model import (DiTConfig, DiTParams, BlockWeights, CheckpointError,
                    init_params, random_params, model_forward_dense,
                    save_checkpoint, load_checkpoint)
from .elastic import (ElasticConfig, ElasticModel, WidthMenu, RouterWeights,
                      RouterOutput, build_model, save_model, load_model,
                      elastic_forward_train, ste_gate, mlp_masked, mlp_sliced,
                      gating_loss, width_loss, total_loss)
from .infer_cache import (InferenceConfig, BlockAction, CacheEntry, TraceRecord,
                          decide_action, denoise_full, oracle_schedule)
from .metrics import FlopModel, flop_reduction, energy_distance, trace_summary
from .trainer import TrainConfig, TrainSnapshot, Adam, train, evaluate
from .cli import main as cli_main

__version__ = "0.1.0"

__all__ = [
    "Tensor", "no_grad", "backward", "grad_check", "GradCheckReport",
    "ShapeError", "DomainError", "ContractError", "NumericError",
    "SynthConfig", "FlowSample", "gen_batch", "trajectory_point", "fm_loss",
    "euler_sample",
    "DiTConfig", "DiTParams", "BlockWeights", "CheckpointError", "init_params",
    "random_params", "model_forward_dense", "save_checkpoint", "load_checkpoint",
    "ElasticConfig", "ElasticModel", "WidthMenu", "RouterWeights", "RouterOutput",
    "build_model", "save_model", "load_model", "elastic_forward_train", "ste_gate",
    "mlp_masked", "mlp_sliced", "gating_loss", "width_loss", "total_loss",
    "InferenceConfig", "BlockAction", "CacheEntry", "TraceRecord", "decide_action",
    "denoise_full", "oracle_schedule",
    "FlopModel", "flop_reduction", "energy_distance", "trace_summary",
    "TrainConfig", "TrainSnapshot", "Adam", "train", "evaluate",
    "cli_main",
]
