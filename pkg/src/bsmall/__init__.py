"""MAML and its sparse variational variant (B-SMALL) on a small numpy autodiff."""

from .autodiff import Tensor, grad, no_grad
from .layers import LayerSpec, Model, build_model, kl_divergence, load_checkpoint, save_checkpoint
from .meta import MetaConfig, MetaState, meta_train, outer_step
from .models import ModelConfig, conv4, sinusoid_mlp
from .sparsity import SparsityReport, measure_sparsity, prune

__all__ = [
    "Tensor", "grad", "no_grad",
    "LayerSpec", "Model", "build_model", "kl_divergence", "load_checkpoint", "save_checkpoint",
    "MetaConfig", "MetaState", "meta_train", "outer_step",
    "ModelConfig", "conv4", "sinusoid_mlp",
    "SparsityReport", "measure_sparsity", "prune",
]
