"""torch module -> portable model-file layers.

Parameters are exported through float64 exactly (float32 embeds losslessly).
Normalization layers fold the framework epsilon into the stored deviation:
``running_std = sqrt(running_var + eps)``, which makes the file's
``gamma*(x-mean)/std + beta`` forward map bit-equivalent to the framework's.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from . import formats


def _np(tensor) -> np.ndarray:
    return tensor.detach().cpu().double().numpy()


def module_to_layer(mod, placement=None) -> dict:
    if isinstance(mod, nn.Linear):
        bias = _np(mod.bias) if mod.bias is not None else np.zeros(mod.out_features)
        return formats.dense_layer(_np(mod.weight), bias)
    if isinstance(mod, nn.Conv2d):
        if mod.stride[0] != mod.stride[1] or mod.padding[0] != mod.padding[1]:
            raise ValueError("only square stride/padding can be exported")
        bias = _np(mod.bias) if mod.bias is not None else np.zeros(mod.out_channels)
        return formats.conv_layer(_np(mod.weight), bias, mod.stride[0], mod.padding[0])
    if isinstance(mod, (nn.BatchNorm1d, nn.BatchNorm2d)):
        std = np.sqrt(_np(mod.running_var) + mod.eps)
        return formats.batchnorm_layer(
            _np(mod.weight), _np(mod.bias), _np(mod.running_mean), std, placement
        )
    if isinstance(mod, nn.ReLU):
        return {"type": "relu"}
    if isinstance(mod, nn.Flatten):
        return {"type": "flatten"}
    if isinstance(mod, nn.MaxPool2d):
        return formats.pool_layer("maxpool", mod.kernel_size, mod.stride)
    if isinstance(mod, nn.AvgPool2d):
        return formats.pool_layer("avgpool", mod.kernel_size, mod.stride)
    raise ValueError(f"cannot export module {type(mod).__name__}")


def sequential_to_layers(model: nn.Sequential, spec) -> list:
    """Export every module, taking normalization placements from the layer list."""
    layers = []
    for mod, item in zip(model, spec, strict=True):
        placement = item[2] if item[0] in ("bn1d", "bn2d") else None
        layers.append(module_to_layer(mod, placement))
    return layers


def reference_logits(model: nn.Sequential, raw_pixels: np.ndarray) -> np.ndarray:
    """Framework forward pass in the training dtype (float32), pre-softmax."""
    model.eval()
    x = torch.from_numpy(formats.normalize(raw_pixels)).float().unsqueeze(0)
    with torch.no_grad():
        out = model(x)[0]
    return out.double().numpy()
