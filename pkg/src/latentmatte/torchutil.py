"""Torch helpers: seeded initialization, parameter hashing, numpy bridges."""

from __future__ import annotations

import hashlib
import math

import numpy as np
import torch
from torch import nn


def new_generator(seed: int) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed))
    return g


def init_conv_(conv: nn.Module, gen: torch.Generator, std_scale: float = 1.0) -> None:
    fan_in = conv.weight[0].numel()
    std = std_scale * math.sqrt(2.0 / fan_in)
    with torch.no_grad():
        conv.weight.normal_(0.0, std, generator=gen)
        if conv.bias is not None:
            conv.bias.zero_()


init_linear_ = init_conv_


def param_hash(*modules: nn.Module) -> str:
    """SHA-256 over all parameters and buffers, in name order."""
    h = hashlib.sha256()
    for m in modules:
        for name, t in sorted(m.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze_(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def state_to_arrays(module: nn.Module, prefix: str = "") -> dict:
    return {prefix + k: v.detach().cpu().numpy().copy()
            for k, v in module.state_dict().items()}


def load_state_from_arrays(module: nn.Module, arrays: dict, prefix: str = "") -> None:
    state = {}
    for key, value in arrays.items():
        if key.startswith(prefix):
            state[key[len(prefix):]] = torch.from_numpy(np.asarray(value))
    module.load_state_dict(state)


def to_chw(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """H x W x 3 numpy image -> (3, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(dtype)


def to_hwc(t: torch.Tensor) -> np.ndarray:
    """(3, H, W) tensor -> H x W x 3 float32 numpy image."""
    return t.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float32)
