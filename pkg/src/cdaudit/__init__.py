"""cdaudit: privacy auditing for cognitive diagnosis models.

Train small diagnosis models, apply approximate unlearning defenses, mount
profile-based membership inference attacks against them, and measure how
much membership signal survives -- including reading knowledge-state vectors
back out of rendered radar charts.
"""

__version__ = "0.1.0"

from .data import (Dataset, InteractionRecord, QMatrix, SplitPlan,
                   SyntheticSpec, generate_synthetic, load_dataset,
                   partition_students, write_dataset)
from .cdm import CdmConfig, CdmModel, evaluate_cdm, load_checkpoint, save_checkpoint, train_cdm
from .unlearn import (ForgetRequest, amnesiac_unlearn, fisher_diag,
                      hutchinson_hessian_diag, lcodec_unlearn, retrain_model,
                      ssd_unlearn, tune_defense, unlearn_model)
from .attack import (extract_features, extract_features_batch, predict_membership,
                     train_dca, train_gbdt, train_miattacker)
from .audit import (AuditPlan, AuditReport, auc, build_attack_training_set,
                    evaluate_defense, run_audit)
from .radar import (ExtractionResult, RadarStyle, extract_kstate_canny,
                    extract_kstate_llm, mae, render_radar)

__all__ = [
    "Dataset", "InteractionRecord", "QMatrix", "SplitPlan", "SyntheticSpec",
    "generate_synthetic", "load_dataset", "partition_students", "write_dataset",
    "CdmConfig", "CdmModel", "evaluate_cdm", "load_checkpoint", "save_checkpoint",
    "train_cdm",
    "ForgetRequest", "amnesiac_unlearn", "fisher_diag", "hutchinson_hessian_diag",
    "lcodec_unlearn", "retrain_model", "ssd_unlearn", "tune_defense", "unlearn_model",
    "extract_features", "extract_features_batch", "predict_membership",
    "train_dca", "train_gbdt", "train_miattacker",
    "AuditPlan", "AuditReport", "auc", "build_attack_training_set",
    "evaluate_defense", "run_audit",
    "ExtractionResult", "RadarStyle", "extract_kstate_canny", "extract_kstate_llm",
    "mae", "render_radar",
]
