"""Meta adversarial training against universal patches and perturbations, on a numpy autodiff engine."""
from .attacks import AttackConfig, AttackResult, ifgsm, low_pass, spgd, transfer_attack
from .data import Dataset, load_folder, synth_dataset
from .evaluation import EvalReport, accuracy_under, desk_grid, emit_report, grid_eval, paper_grid
from .meta import MetaSet, init_meta_set, reptile_update, select
from .model import Architecture, Classifier, CostCounters, ModelParams, build_model, load_checkpoint, save_checkpoint
from .perturbation import PerturbationSpec, apply, apply_batch, project
from .training import TrainConfig, mat_step, train

__version__ = "0.1.0"

__all__ = [
    "Architecture", "AttackConfig", "AttackResult", "Classifier", "CostCounters", "Dataset", "EvalReport",
    "MetaSet", "ModelParams", "PerturbationSpec", "TrainConfig", "accuracy_under", "apply", "apply_batch",
    "build_model", "desk_grid", "emit_report", "grid_eval", "ifgsm", "init_meta_set", "load_checkpoint",
    "load_folder", "low_pass", "mat_step", "paper_grid", "project", "reptile_update", "save_checkpoint",
    "select", "spgd", "synth_dataset", "train", "transfer_attack",
]
