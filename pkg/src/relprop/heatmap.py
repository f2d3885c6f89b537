"""White-to-red heat-map rendering and the byte-exact PPM/CSV formats.

A pixel's redness encodes its normalized relevance: (255, 255, 255) at 0,
(255, 0, 0) at 1, linearly in between with green/blue rounded half away
from zero.  Multi-channel relevance is summed over channels before mapping,
which keeps the total relevance of the map equal to the input relevance.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidValueError, ParseError
from .tensor import Tensor

NORM_MAX = "max"


@dataclass
class Heatmap:
    width: int
    height: int
    values: Tensor  # (h, w) in [0, 1]
    rgb: np.ndarray  # (h, w, 3) uint8
    all_zero: bool = False


def render_heatmap(r_input: Tensor, normalization: str = NORM_MAX) -> Heatmap:
    """Map non-negative relevance onto the white-to-red ramp.

    ``normalization`` is either ``"max"`` (divide by the maximum) or ``"pN"``
    (divide by the N-th percentile of the positive values, clamping the rest),
    which keeps single-pixel outliers from washing out the whole map.
    """
    r = np.asarray(r_input, dtype=np.float64)
    if r.ndim == 3:
        r = r.sum(axis=0)
    if r.ndim != 2:
        raise InvalidValueError(f"relevance map must be rank 2 or 3, got rank {r.ndim}")
    if not np.all(np.isfinite(r)):
        raise InvalidValueError("relevance map contains non-finite values")
    if r.min() < 0.0:
        raise InvalidValueError(
            f"relevance map contains negative values (min {r.min():.6g}); "
            f"only non-negative relevance is rendered"
        )
    h, w = r.shape
    positive = r[r > 0.0]
    if positive.size == 0:
        values = np.zeros((h, w))
        rgb = np.full((h, w, 3), 255, dtype=np.uint8)
        return Heatmap(w, h, values, rgb, all_zero=True)
    reference = _reference(positive, normalization)
    values = np.clip(r / reference, 0.0, 1.0)
    fade = np.floor(255.0 * (1.0 - values) + 0.5).astype(np.uint8)
    rgb = np.empty((h, w, 3), dtype=np.uint8)
    rgb[..., 0] = 255
    rgb[..., 1] = fade
    rgb[..., 2] = fade
    return Heatmap(w, h, values, rgb)


def _reference(positive: np.ndarray, normalization: str) -> float:
    if normalization == NORM_MAX:
        return float(positive.max())
    if normalization.startswith("p"):
        try:
            pct = float(normalization[1:])
        except ValueError:
            pct = -1.0
        if 0.0 < pct <= 100.0:
            ref = float(np.percentile(positive, pct))
            return ref if ref > 0.0 else float(positive.max())
    raise InvalidValueError(
        f"unknown normalization {normalization!r}; expected 'max' or 'pN' with 0 < N <= 100"
    )


# ---------------------------------------------------------------------------
# PPM / PGM

def write_ppm(heatmap: Heatmap, path) -> None:
    """Binary P6, maxval 255, rows top to bottom."""
    header = f"P6\n{heatmap.width} {heatmap.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + heatmap.rgb.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) with maxval 255.

    Returns uint8 arrays of shape (h, w) for P5 and (h, w, 3) for P6.
    """
    blob = Path(path).read_bytes()
    magic, pos = _pnm_token(blob, 0, path)
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"{path}: not a binary PGM/PPM file (magic {magic!r})")
    fields = []
    for _ in range(3):
        token, pos = _pnm_token(blob, pos, path)
        try:
            fields.append(int(token))
        except ValueError:
            raise ParseError(f"{path}: bad header token {token!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ParseError(f"{path}: bad image size {width}x{height}")
    if maxval != 255:
        raise ParseError(f"{path}: unsupported maxval {maxval}, expected 255")
    channels = 1 if magic == b"P5" else 3
    count = width * height * channels
    data = blob[pos : pos + count]
    if len(data) != count:
        raise ParseError(f"{path}: expected {count} pixel bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8)
    return arr.reshape((height, width) if channels == 1 else (height, width, channels))


def _pnm_token(blob: bytes, pos: int, path) -> tuple:
    while pos < len(blob):
        ch = blob[pos : pos + 1]
        if ch == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(blob) and not blob[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ParseError(f"{path}: truncated header")
    return blob[start:pos], pos + 1


def load_image(path) -> Tensor:
    """Raw pixel values 0..255 as a float64 (channels, h, w) tensor."""
    arr = read_pnm(path)
    if arr.ndim == 2:
        return arr[None, :, :].astype(np.float64)
    return np.transpose(arr, (2, 0, 1)).astype(np.float64)


# ---------------------------------------------------------------------------
# relevance CSV

def write_csv(r_input: Tensor, path) -> None:
    """One row per image row, shortest round-trip decimals, trailing newline.

    Rank-3 relevance is summed over channels first, matching the rendering
    aggregation.
    """
    r = np.asarray(r_input, dtype=np.float64)
    if r.ndim == 3:
        r = r.sum(axis=0)
    if r.ndim == 1:
        r = r[None, :]
    if r.ndim != 2:
        raise InvalidValueError(f"relevance must be rank 1..3, got rank {r.ndim}")
    lines = [",".join(repr(float(v)) for v in row) for row in r]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_csv(path) -> Tensor:
    rows = []
    text = Path(path).read_text(encoding="ascii")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append([float(tok) for tok in line.split(",")])
        except ValueError as e:
            raise ParseError(f"{path}: line {lineno}: {e}") from None
    if not rows:
        raise ParseError(f"{path}: no data rows")
    widths = {len(row) for row in rows}
    if len(widths) != 1:
        raise ParseError(f"{path}: ragged rows (widths {sorted(widths)})")
    return np.asarray(rows, dtype=np.float64)
