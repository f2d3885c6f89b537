"""Writers for the fixture bundle: model JSON, PGM/PPM samples, manifest.

This module is deliberately self-contained: it encodes the model file
contract (format_version 1, flat number arrays with explicit shapes,
shortest round-trip decimals) without importing the engine that consumes
it, so the two sides of the contract stay independent.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def tensor_dict(arr) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to export non-finite parameter values")
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def dense_layer(weights, bias) -> dict:
    return {"type": "dense", "weights": tensor_dict(weights), "bias": tensor_dict(bias)}


def conv_layer(kernel, bias, stride=1, padding=0) -> dict:
    return {
        "type": "conv2d",
        "kernel": tensor_dict(kernel),
        "bias": tensor_dict(bias),
        "stride": int(stride),
        "padding": int(padding),
    }


def batchnorm_layer(gamma, beta, running_mean, running_std, placement) -> dict:
    std = np.asarray(running_std, dtype=np.float64)
    if np.any(std <= 0.0):
        raise ValueError("running_std must be strictly positive after epsilon folding")
    return {
        "type": "batchnorm",
        "gamma": tensor_dict(gamma),
        "beta": tensor_dict(beta),
        "running_mean": tensor_dict(running_mean),
        "running_std": tensor_dict(std),
        "placement": placement,
    }


def pool_layer(kind, window, stride) -> dict:
    return {"type": kind, "window": [int(window), int(window)], "stride": int(stride)}


def model_dict(layers, input_shape, class_count, metadata) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "input_shape": [int(e) for e in input_shape],
        "input_low": -1.0,
        "input_high": 1.0,
        "class_count": int(class_count),
        "metadata": metadata,
        "layers": layers,
    }


def write_model(doc: dict, path) -> None:
    Path(path).write_text(
        json.dumps(doc, allow_nan=False, separators=(",", ":")) + "\n", encoding="ascii"
    )


def write_manifest(samples: list, path) -> None:
    Path(path).write_text(
        json.dumps({"samples": samples}, allow_nan=False, indent=1) + "\n",
        encoding="ascii",
    )


def write_image(pixels, path) -> None:
    """Raw 0..255 pixels as binary PGM (1 channel) or PPM (3 channels)."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise ValueError("sample images must be uint8")
    if pixels.ndim == 3 and pixels.shape[0] == 1:
        pixels = pixels[0]
    if pixels.ndim == 2:
        h, w = pixels.shape
        header = f"P5\n{w} {h}\n255\n".encode("ascii")
        payload = pixels.tobytes()
    elif pixels.ndim == 3 and pixels.shape[0] == 3:
        _, h, w = pixels.shape
        header = f"P6\n{w} {h}\n255\n".encode("ascii")
        payload = np.transpose(pixels, (1, 2, 0)).tobytes()
    else:
        raise ValueError(f"cannot encode image of shape {pixels.shape}")
    Path(path).write_bytes(header + payload)


def normalize(raw) -> np.ndarray:
    """The engine's pixel scaling: ((x/255) - 0.5) / 0.5, onto [-1, 1]."""
    return (np.asarray(raw, dtype=np.float64) / 255.0 - 0.5) / 0.5
