"""LoRA experts over a frozen segmentation base, selected by prototype gating."""

from .errors import MileError
from .experts import (Expert, ExpertRegistry, TaskSpec, assemble, begin_task, load_registry,
                      register, save_registry, train_expert)
from .gating import Prototype, compute_prototype, confusion_matrix, cosine_similarity, infer, route
from .lora import LoraAdapter, adapter_param_count, delta, init_adapter, load_adapter, merge, save_adapter
from .nn import SgdConfig, TinySegNet, build_net, extract_feature, forward

__version__ = "0.1.0"
