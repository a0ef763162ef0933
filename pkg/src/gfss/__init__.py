"""Generalized few-shot semantic segmentation head on synthetic feature maps."""

from .cbbi import InferenceConfig, infer
from .fcp import EpisodeBatch, FcpParams, fcp_forward
from .metrics import ConfusionMatrix, EvalReport, confusion_accumulate, evaluate, hiou
from .pipeline import RunConfig, desk_config, load_config
from .pkl import KernelBank, prototypical_kernel_update
from .registry import SessionRegistry, SupportSet, extend_session, register_novel
from .synthgen import WorldSpec, make_world
from .training import FrozenModel, TrainConfig, freeze, train

__version__ = "0.1.0"

__all__ = [
    "ConfusionMatrix", "EpisodeBatch", "EvalReport", "FcpParams", "FrozenModel", "InferenceConfig",
    "KernelBank", "RunConfig", "SessionRegistry", "SupportSet", "TrainConfig", "WorldSpec",
    "confusion_accumulate", "desk_config", "evaluate", "extend_session", "fcp_forward", "freeze",
    "hiou", "infer", "load_config", "make_world", "prototypical_kernel_update", "register_novel", "train",
]
