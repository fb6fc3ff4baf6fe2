"""Fully-convolutional C+1 channel classifier and its checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, asdict
from typing import List, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DataError, ShapeError
from .formats import atomic_write_bytes
from .numerics import Tensor

NORM_EPS = 1e-5
CKPT_MAGIC = b"EPSCKPT1"


@dataclass
class ClassifierConfig:
    num_classes: int = 3
    in_channels: int = 3
    hidden: List[int] = field(default_factory=lambda: [16, 32])
    kernel_size: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive", field="model.num_classes")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be positive", field="model.in_channels")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd and positive", field="model.kernel_size")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive", field="model.hidden")
        self.hidden = list(self.hidden)

    @property
    def out_channels(self) -> int:
        return self.num_classes + 1

    def layer_shapes(self):
        """(kernel shape, bias shape) per conv layer; the last is the 1x1 head."""
        shapes = []
        c_in = self.in_channels
        for h in self.hidden:
            shapes.append(((h, c_in, self.kernel_size, self.kernel_size), (h,)))
            c_in = h
        shapes.append(((self.out_channels, c_in, 1, 1), (self.out_channels,)))
        return shapes

    def to_dict(self):
        return asdict(self)


@dataclass
class ClassifierParams:
    kernels: List[Tensor]
    biases: List[Tensor]

    def tensors(self) -> List[Tensor]:
        """Flat list in definition order: kernel_0, bias_0, kernel_1, ..."""
        out = []
        for k, b in zip(self.kernels, self.biases):
            out.extend((k, b))
        return out

    @property
    def num_classes(self) -> int:
        return self.kernels[-1].shape[0] - 1

    @property
    def kernel_size(self) -> int:
        return max(k.shape[-1] for k in self.kernels)

    def copy(self) -> "ClassifierParams":
        return ClassifierParams([nx.parameter(k.data) for k in self.kernels],
                                [nx.parameter(b.data) for b in self.biases])


@dataclass
class ForwardOutputs:
    scores: Tensor  # S, (C+1) x H x W, raw
    maps: Tensor  # M, (C+1) x H x W, in [0, 1]
    logits: Tensor  # y_hat, length C

    @property
    def num_classes(self) -> int:
        return self.logits.shape[-1]


def init_params(config: ClassifierConfig) -> ClassifierParams:
    rng = np.random.default_rng(config.seed)
    kernels, biases = [], []
    for kshape, bshape in config.layer_shapes():
        c_out, c_in, k, _ = kshape
        fan_in, fan_out = c_in * k * k, c_out * k * k
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        kernels.append(nx.parameter(rng.uniform(-bound, bound, size=kshape)))
        biases.append(nx.parameter(np.zeros(bshape)))
    return ClassifierParams(kernels, biases)


def _check_params(params: ClassifierParams, image: np.ndarray):
    if len(params.kernels) != len(params.biases) or not params.kernels:
        raise ShapeError("params need one bias per kernel and at least one layer")
    c_in = params.kernels[0].shape[1]
    if image.shape[-3] != c_in:
        raise ShapeError(f"image has {image.shape[-3]} channels, classifier expects {c_in}")
    h, w = image.shape[-2:]
    if min(h, w) < params.kernel_size:
        raise ShapeError(f"image {h}x{w} smaller than kernel size {params.kernel_size}")


def score_maps(params: ClassifierParams, image) -> Tensor:
    """Raw score stack S for an image (C_in x H x W) or batch (N x C_in x H x W)."""
    x = nx.as_tensor(image)
    _check_params(params, x.data)
    single = x.ndim == 3
    # hidden stack runs channels-last; only the score stack is returned as N x C x H x W
    h = nx.permute(x[None] if single else x, (0, 2, 3, 1))
    n = len(params.kernels)
    for i, (k, b) in enumerate(zip(params.kernels, params.biases)):
        h = nx.conv2d_nhwc(h, k, b)
        if i < n - 1:
            h = nx.relu(h)
    s = nx.permute(h, (0, 3, 1, 2))
    return s[0] if single else s


def normalize_maps(scores: Tensor) -> Tensor:
    """relu(S) divided per channel by its detached maximum plus NORM_EPS."""
    act = nx.relu(scores)
    peak = nx.max_detached(act, axis=(-2, -1), keepdims=True)
    return act / (peak + NORM_EPS)


def outputs_from_scores(scores: Tensor) -> ForwardOutputs:
    c = scores.shape[-3] - 1
    maps = normalize_maps(scores)
    # background channel (last) never feeds a logit
    logits = nx.global_avg_pool(scores[..., :c, :, :])
    return ForwardOutputs(scores, maps, logits)


def forward(params: ClassifierParams, image) -> ForwardOutputs:
    return outputs_from_scores(score_maps(params, image))


def forward_batch(params: ClassifierParams, images: np.ndarray) -> List[ForwardOutputs]:
    """One batched conv pass, split into per-image outputs on the same tape."""
    scores = score_maps(params, np.asarray(images, dtype=np.float64))
    return [outputs_from_scores(scores[i]) for i in range(scores.shape[0])]


# ---------------------------------------------------------------- checkpoint

def save_checkpoint(params: ClassifierParams, path):
    buf = bytearray(CKPT_MAGIC)
    for t in params.tensors():
        buf += struct.pack("<I", t.ndim)
        buf += struct.pack(f"<{t.ndim}I", *t.shape)
        buf += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    atomic_write_bytes(path, bytes(buf))


def load_checkpoint(path) -> ClassifierParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic", field="magic")
    pos, arrays = 8, []
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise DataError(f"{path}: truncated rank", field="rank")
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if pos + 4 * rank > len(raw):
            raise DataError(f"{path}: truncated dims", field="dims")
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise DataError(f"{path}: truncated values", field="values")
        arrays.append(np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims))
        pos += nbytes
    if not arrays or len(arrays) % 2:
        raise DataError(f"{path}: expected kernel/bias pairs, got {len(arrays)} tensors", field="layers")
    kernels = [nx.parameter(a) for a in arrays[0::2]]
    biases = [nx.parameter(a) for a in arrays[1::2]]
    for k, b in zip(kernels, biases):
        if k.ndim != 4 or b.shape != (k.shape[0],):
            raise DataError(f"{path}: inconsistent layer shapes {k.shape} / {b.shape}", field="layers")
    return ClassifierParams(kernels, biases)


def params_from_arrays(arrays: Sequence[np.ndarray]) -> ClassifierParams:
    return ClassifierParams([nx.parameter(a) for a in arrays[0::2]],
                            [nx.parameter(a) for a in arrays[1::2]])
