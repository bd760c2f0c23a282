"""Lightweight cross-modal representation learning over frozen embeddings.

A small shared transformer encoder maps paired embeddings from two modalities
into one unit-norm space, trained with a soft-target bidirectional
contrastive loss.  Everything runs on numpy; the row kernels are compiled
with numba when it is installed (set ``LIGHTCRL_DISABLE_NUMBA=1`` to opt out).
"""

__version__ = "0.1.0"

from .autograd import Tensor, no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    PairedEmbeddingSet,
    SyntheticSpec,
    class_prototypes,
    generate_synthetic,
    load_embeddings,
    save_embeddings,
    standard_synthetic,
)
from .errors import (
    ContractError,
    CorruptionError,
    DataError,
    DegenerateInputError,
    DomainError,
    FormatError,
    LightCRLError,
    NumericalError,
    ShapeError,
)
from .evaluate import ClassPrototypeSet, EvalReport, recall_at_k, retrieval_recall_at_k, train_linear_probe, zero_shot_classify
from .gradcheck import finite_difference_check
from .model import DFEConfig, DFEParameters, analytic_param_count, encode_modality, init_parameters
from .objective import dfe_loss, total_loss
from .train import ClassifierConfig, TrainConfig, Trainer, finetune, fit
