"""
Low-rank adaptation for Conv2d and Linear layers.

A frozen base layer W gets a trainable update (alpha/r)·B·A. For convs, A
is a conv with the base kernel geometry mapping in→r and B is a 1×1 conv
r→out, so the delta kernel is B @ A over flattened input patches.
B starts at zero: a freshly attached adapter changes nothing.
"""
import logging
import math
from typing import Dict, List, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.utils.errors import EmptySelectionError, LoRARankError

logger = logging.getLogger(__name__)

ADAPTABLE_TYPES = (nn.Conv2d, nn.Linear)


class LoRAConv2d(nn.Module):
    def __init__(self, base: nn.Conv2d, rank: int = 4, alpha: float = 4.0):
        super().__init__()
        if base.groups != 1:
            raise LoRARankError("Grouped convolutions are not supported")
        kh, kw = base.kernel_size
        fan_in = base.in_channels * kh * kw
        if rank < 1 or rank > min(fan_in, base.out_channels):
            raise LoRARankError(
                f"rank {rank} must lie in [1, min({fan_in}, {base.out_channels})] for this layer"
            )
        self.base = base
        for param in self.base.parameters():
            param.requires_grad_(False)
        self.rank = rank
        self.alpha = float(alpha)
        self.scaling = self.alpha / rank
        self.lora_A = nn.Conv2d(
            base.in_channels, rank, base.kernel_size,
            stride=base.stride, padding=base.padding, dilation=base.dilation, bias=False,
        )
        self.lora_B = nn.Conv2d(rank, base.out_channels, 1, bias=False)
        nn.init.kaiming_uniform_(self.lora_A.weight, a=math.sqrt(5))
        nn.init.zeros_(self.lora_B.weight)

    def delta_weight(self) -> torch.Tensor:
        out_channels = self.base.out_channels
        a = self.lora_A.weight.reshape(self.rank, -1)
        b = self.lora_B.weight.reshape(out_channels, self.rank)
        return (self.scaling * (b @ a)).reshape_as(self.base.weight)

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.delta_weight()

    def merged_forward(self, x: torch.Tensor) -> torch.Tensor:
        """Single conv with W + (α/r)·B·A"""
        return F.conv2d(
            x, self.merged_weight(), self.base.bias,
            stride=self.base.stride, padding=self.base.padding, dilation=self.base.dilation,
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * self.lora_B(self.lora_A(x))


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int = 4, alpha: float = 4.0):
        super().__init__()
        if rank < 1 or rank > min(base.in_features, base.out_features):
            raise LoRARankError(
                f"rank {rank} must lie in [1, min({base.in_features}, {base.out_features})] for this layer"
            )
        self.base = base
        for param in self.base.parameters():
            param.requires_grad_(False)
        self.rank = rank
        self.alpha = float(alpha)
        self.scaling = self.alpha / rank
        self.lora_A = nn.Parameter(torch.zeros(rank, base.in_features))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))

    def delta_weight(self) -> torch.Tensor:
        return self.scaling * (self.lora_B @ self.lora_A)

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.delta_weight()

    def merged_forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.merged_weight(), self.base.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * ((x @ self.lora_A.t()) @ self.lora_B.t())


LoRALayer = Union[LoRAConv2d, LoRALinear]


def _parent(model: nn.Module, qualified_name: str):
    names = qualified_name.split(".")
    parent = model
    for name in names[:-1]:
        parent = getattr(parent, name)
    return parent, names[-1]


def adaptable_layers(model: nn.Module) -> List[str]:
    """Qualified names of every Conv2d/Linear layer not already wrapped"""
    names = []
    for name, module in model.named_modules():
        if isinstance(module, (LoRAConv2d, LoRALinear)):
            continue
        if isinstance(module, ADAPTABLE_TYPES) and not _inside_lora(model, name):
            names.append(name)
    return names


def _inside_lora(model: nn.Module, name: str) -> bool:
    parts = name.split(".")
    module = model
    for part in parts[:-1]:
        module = getattr(module, part)
        if isinstance(module, (LoRAConv2d, LoRALinear)):
            return True
    return False


def select_layers(model: nn.Module, name_substring: str) -> List[str]:
    """
    Layers whose qualified name contains the substring ('' selects all).

    Raises:
        EmptySelectionError: nothing matches
    """
    selected = [name for name in adaptable_layers(model) if name_substring in name]
    if not selected:
        logger.warning(f"⚠️ No layer name contains '{name_substring}'; nothing to train")
        raise EmptySelectionError(f"No trainable layer matches '{name_substring}'")
    return selected


def wrap_layer(layer: nn.Module, rank: int, alpha: float) -> LoRALayer:
    if isinstance(layer, nn.Conv2d):
        return LoRAConv2d(layer, rank=rank, alpha=alpha)
    if isinstance(layer, nn.Linear):
        return LoRALinear(layer, rank=rank, alpha=alpha)
    raise LoRARankError(f"Cannot attach LoRA to {type(layer).__name__}")


def inject_lora(model: nn.Module, layer_names: List[str], rank: int, alpha: float) -> Dict[str, LoRALayer]:
    """Replace the named layers in place with LoRA-wrapped versions"""
    adapters: Dict[str, LoRALayer] = {}
    for name in layer_names:
        parent, attr = _parent(model, name)
        adapter = wrap_layer(getattr(parent, attr), rank, alpha)
        setattr(parent, attr, adapter)
        adapters[name] = adapter
        logger.debug(f"[LoRA] wrapped {name} (rank={rank}, alpha={alpha})")
    logger.info(f"[LoRA] wrapped {len(adapters)} layers")
    return adapters


def lora_parameters(model: nn.Module) -> List[nn.Parameter]:
    return [param for name, param in model.named_parameters() if "lora_" in name]


def lora_state(model: nn.Module) -> Dict[str, torch.Tensor]:
    return {name: tensor for name, tensor in model.state_dict().items() if "lora_" in name}


def merge_lora(model: nn.Module) -> nn.Module:
    """Fold every adapter into its base layer and unwrap it"""
    wrapped = [name for name, module in model.named_modules() if isinstance(module, (LoRAConv2d, LoRALinear))]
    for name in wrapped:
        parent, attr = _parent(model, name)
        adapter = getattr(parent, attr)
        with torch.no_grad():
            adapter.base.weight.copy_(adapter.merged_weight())
        setattr(parent, attr, adapter.base)
    return model
