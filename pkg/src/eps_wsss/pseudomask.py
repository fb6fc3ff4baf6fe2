"""Localization maps -> discrete pseudo-masks, with multi-scale aggregation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError
from .model import NORM_EPS, ClassifierParams, forward_batch


@dataclass
class InferenceConfig:
    scales: Tuple[float, ...] = (0.5, 0.75, 1.0, 1.25, 1.5)
    flip: bool = True
    # "channel": argmax against the learned background map;
    # a number: constant background score instead (classic CAM thresholding)
    background: Union[str, float] = "channel"

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if not self.scales:
            raise ConfigError("scales must be non-empty", field="inference.scales")
        if any(s <= 0 for s in self.scales):
            raise ConfigError("scales must be positive", field="inference.scales")
        if isinstance(self.background, str):
            if self.background != "channel":
                raise ConfigError("background must be 'channel' or a number", field="inference.background")
        else:
            self.background = float(self.background)
            if not 0.0 <= self.background <= 1.0:
                raise ConfigError("background score must lie in [0, 1]", field="inference.background")

    @property
    def bg_score(self) -> Optional[float]:
        return None if self.background == "channel" else self.background


def _resize_axis(arr: np.ndarray, out: int, axis: int) -> np.ndarray:
    n_in = arr.shape[axis]
    if n_in == out:
        return arr
    # half-pixel centres: src = (dst + 0.5) * in / out - 0.5, clamped to the edge pixels
    src = (np.arange(out) + 0.5) * (n_in / out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = out
    t = t.reshape(shape)
    return a * (1.0 - t) + b * t


def resize_bilinear(arr, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes (rows first, then columns)."""
    arr = np.asarray(arr, dtype=np.float64)
    return _resize_axis(_resize_axis(arr, out_h, arr.ndim - 2), out_w, arr.ndim - 1)


def scaled_size(n: int, scale: float) -> int:
    return max(1, int(np.floor(n * scale + 0.5)))


def infer_maps(params: ClassifierParams, image, config: Optional[InferenceConfig] = None) -> np.ndarray:
    """Mean of normalised maps over scales (and flips), back at input resolution."""
    config = config or InferenceConfig()
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape
    k = params.kernel_size
    variants = []
    with nx.no_grad():
        for s in config.scales:
            sh, sw = scaled_size(h, s), scaled_size(w, s)
            if min(sh, sw) < k:
                raise ShapeError(f"scale {s} gives {sh}x{sw}, smaller than kernel size {k}")
            img_s = resize_bilinear(image, sh, sw)
            batch = [img_s, img_s[:, :, ::-1]] if config.flip else [img_s]
            outs = forward_batch(params, np.stack(batch))
            for j, out in enumerate(outs):
                m = out.maps.data
                if j == 1:
                    m = m[:, :, ::-1]
                variants.append(resize_bilinear(m, h, w))
    agg = np.mean(variants, axis=0)
    if len(variants) == 1:
        # a single variant is already normalised
        return agg
    return agg / (agg.max(axis=(1, 2), keepdims=True) + NORM_EPS)


def to_pseudo_mask(maps, y, bg_score: Optional[float] = None) -> np.ndarray:
    """Per-pixel argmax over {background} + present classes.

    Output labels: 0 background, i+1 for class channel i. Ties go to the
    background, then to the lowest class index. With ``bg_score`` the
    background channel is replaced by that constant.
    """
    maps = np.asarray(maps, dtype=np.float64)
    c = maps.shape[0] - 1
    y = np.asarray(y)
    if y.shape != (c,):
        raise ShapeError(f"label vector length {y.shape} does not match {c} classes")
    best = maps[c].copy() if bg_score is None else np.full(maps.shape[1:], float(bg_score))
    label = np.zeros(maps.shape[1:], dtype=np.int64)
    for i in range(c):
        if y[i] <= 0.5:
            continue
        better = maps[i] > best  # strict: earlier candidates win ties
        label[better] = i + 1
        best = np.where(better, maps[i], best)
    return label


def pseudo_mask(params: ClassifierParams, image, y, config: Optional[InferenceConfig] = None) -> np.ndarray:
    config = config or InferenceConfig()
    return to_pseudo_mask(infer_maps(params, image, config), y, config.bg_score)
