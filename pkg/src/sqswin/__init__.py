"""Siamese quadratic Swin transformer for browning-score regression, in numpy."""

from . import autodiff
from .autodiff import Tensor, backward, no_grad, precision
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, SyntheticCorpus, Toggles, desk_schedule
from .errors import (ConfigError, ContractError, IngestionError, NonFiniteError, ShapeError, SQSwinError,
                     UndefinedCorrelationError, ValidationError)
from .evaluate import LADDER, export_attention, predict_image, run_ablation, train_run
from .gradcheck import check_gradients, run_suite
from .metrics import MetricsResult, evaluate_metrics, mae, mse, pcc
from .model import QSwinConfig, QSwinModel, count_params, linear_twin, macs, qkv_weight_count
from .optim import SGD, Adam
from .patches import (LabeledImage, PatchSpec, SyntheticSpec, augment, build_dataset, extract_patches,
                      generate_synthetic, load_dataset, synthetic_corpus)
from .quadratic import QuadraticLinear, RelinearSchedule
from .reptile import ReptileConfig, TrainOptions, TrainSchedule, meta_update, train
from .siamese import prediction_loss, siamese_loss, total_loss

__version__ = "0.1.0"
