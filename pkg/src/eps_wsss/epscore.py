"""Saliency-supervised training objective for the C+1 channel classifier.

Class channels are indexed 0..C-1 here (channel i holds the map for mask
label i+1); channel C is the background map.

Pipeline for one image::

    maps --select_maps--> Selection --build_fg_bg--> (fg, bg)
         --estimate_saliency--> estimated saliency --saliency_loss--> L_sal
    logits --classification_loss--> L_cls;  L_total = L_cls + L_sal
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError
from .model import ClassifierParams, ForwardOutputs, forward, forward_batch
from .numerics import Tensor

STRATEGIES = ("baseline", "naive", "predefined", "adaptive")
LOSS_MODES = ("cls+sal", "cls_only")


@dataclass
class FusionConfig:
    lam: float = 0.5
    tau: float = 0.4
    strategy: str = "adaptive"
    predefined: Tuple[int, ...] = ()
    loss: str = "cls+sal"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda {self.lam} outside [0, 1]", field="fusion.lam")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau {self.tau} outside [0, 1]", field="fusion.tau")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}",
                              field="fusion.strategy")
        if self.loss not in LOSS_MODES:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {LOSS_MODES}", field="fusion.loss")
        self.predefined = tuple(int(c) for c in self.predefined)
        if any(c < 0 for c in self.predefined):
            raise ConfigError("predefined class indices must be non-negative", field="fusion.predefined")


@dataclass
class Selection:
    strategy: str
    overlap: Dict[int, float]  # present class -> O_i; empty for the baseline
    foreground: Tuple[int, ...]
    background: Tuple[int, ...]

    def assignment(self, i: int) -> Optional[str]:
        if i in self.foreground:
            return "foreground"
        if i in self.background:
            return "background"
        return None


@dataclass
class FgBgMaps:
    fg: Tensor
    bg: Tensor


@dataclass
class LossBreakdown:
    sal: float
    cls: float
    total: float


# ------------------------------------------------------------------ selection

def binarize(m) -> np.ndarray:
    """Strict threshold at 0.5."""
    m = m.data if isinstance(m, Tensor) else np.asarray(m)
    return m > 0.5


def overlap_ratio(b_i, b_s) -> float:
    """|B_i & B_s| / |B_i|, defined as 0 when B_i is empty."""
    b_i, b_s = np.asarray(b_i, dtype=bool), np.asarray(b_s, dtype=bool)
    if b_i.shape != b_s.shape:
        raise ShapeError(f"overlap_ratio shapes differ: {b_i.shape} vs {b_s.shape}")
    n = int(b_i.sum())
    if n == 0:
        return 0.0
    return int((b_i & b_s).sum()) / n


def _present(y) -> List[int]:
    y = np.asarray(y)
    present = [int(i) for i in np.flatnonzero(y > 0.5)]
    if not present:
        raise ShapeError("label vector has no positive class")
    return present


def select_maps(maps, y, saliency, config: FusionConfig) -> Selection:
    """Assign each present class map to the foreground or background side.

    The decision is discrete and treated as a gradient constant; it is
    recomputed on every call from the current maps.
    """
    m = maps.data if isinstance(maps, Tensor) else np.asarray(maps)
    c = m.shape[0] - 1
    y = np.asarray(y)
    if y.shape != (c,):
        raise ShapeError(f"label vector length {y.shape} does not match {c} classes")
    bad = [k for k in config.predefined if k >= c]
    if bad:
        raise ConfigError(f"predefined classes {bad} out of range for C={c}", field="fusion.predefined")
    present = _present(y)

    if config.strategy == "baseline":
        return Selection("baseline", {}, tuple(present), ())

    b_s = binarize(saliency)
    ratios = np.array([overlap_ratio(binarize(m[i]), b_s) for i in present])
    ratios = nx.detached(ratios)
    overlap = {i: float(o) for i, o in zip(present, ratios)}

    if config.strategy == "naive":
        fg = present
    elif config.strategy == "predefined":
        fg = [i for i in present if i not in config.predefined]
    else:
        fg = [i for i in present if overlap[i] > config.tau]
    bg = [i for i in present if i not in fg]
    return Selection(config.strategy, overlap, tuple(fg), tuple(bg))


def build_fg_bg(maps: Tensor, y, selection: Selection) -> FgBgMaps:
    """Sum selected class maps (plus the background channel for bg), then clamp to [0, 1]."""
    c = maps.shape[0] - 1
    y = np.asarray(y)
    zero = Tensor(np.zeros(maps.shape[1:]))
    fg = zero
    for i in selection.foreground:
        if y[i] > 0.5:
            fg = fg + maps[i]
    bg = maps[c]
    for i in selection.background:
        if y[i] > 0.5:
            bg = bg + maps[i]
    return FgBgMaps(nx.clamp01(fg), nx.clamp01(bg))


def estimate_saliency(fgbg: FgBgMaps, lam: float = 0.5) -> Tensor:
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda {lam} outside [0, 1]", field="fusion.lam")
    return lam * fgbg.fg + (1.0 - lam) * (1.0 - fgbg.bg)


# --------------------------------------------------------------------- losses

def saliency_loss(saliency, estimated: Tensor) -> Tensor:
    """Mean squared pixel difference between observed and estimated saliency."""
    s = nx.as_tensor(saliency)
    if s.shape != estimated.shape:
        raise ShapeError(f"saliency {s.shape} vs estimate {estimated.shape}")
    return nx.mean(nx.square(s - estimated))


def classification_loss(logits: Tensor, y) -> Tensor:
    """Multi-label soft margin loss.

    Uses -[y log s(z) + (1-y) log(1-s(z))] = softplus(z) - y*z, so no
    logarithm of an underflowed sigmoid is ever taken.
    """
    y = np.asarray(y, dtype=np.float64)
    if logits.shape != y.shape:
        raise ShapeError(f"logits {logits.shape} vs labels {y.shape}")
    return nx.mean(nx.softplus(logits) - logits * y)


def scene_loss(out: ForwardOutputs, saliency, y, config: FusionConfig):
    """(LossBreakdown, root tensor) for one image's forward outputs."""
    l_cls = classification_loss(out.logits, y)
    if config.loss == "cls_only":
        l_sal = Tensor(0.0)
    else:
        sel = select_maps(out.maps, y, saliency, config)
        est = estimate_saliency(build_fg_bg(out.maps, y, sel), config.lam)
        l_sal = saliency_loss(saliency, est)
    root = l_cls + l_sal
    return LossBreakdown(l_sal.item(), l_cls.item(), root.item()), root


def total_loss(scene, params: ClassifierParams, config: Optional[FusionConfig] = None):
    """Forward one scene and build its loss; returns (LossBreakdown, root)."""
    config = config or FusionConfig()
    return scene_loss(forward(params, scene.image), scene.saliency, scene.labels, config)


def batch_loss(params: ClassifierParams, scenes: Sequence, config: FusionConfig):
    if not scenes:
        raise ShapeError("empty batch")
    outs = forward_batch(params, np.stack([s.image for s in scenes]))
    parts, roots = [], []
    for out, s in zip(outs, scenes):
        br, root = scene_loss(out, s.saliency, s.labels, config)
        parts.append(br)
        roots.append(root)
    acc = roots[0]
    for r in roots[1:]:
        acc = acc + r
    root = acc * (1.0 / len(roots))
    n = len(parts)
    mean_br = LossBreakdown(sum(p.sal for p in parts) / n, sum(p.cls for p in parts) / n, root.item())
    return mean_br, root


def train_step(params: ClassifierParams, scenes: Sequence, config: FusionConfig, optimizer: nx.SGD):
    """Mean loss over the batch, one backward, one optimiser step."""
    br, root = batch_loss(params, scenes, config)
    grads = nx.backward(root, params.tensors())
    optimizer.step(grads)
    return params, br


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    head_lr_mult: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be non-negative", field="train.steps")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive", field="train.batch_size")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative", field="train.lr")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)", field="train.momentum")
        if self.head_lr_mult <= 0:
            raise ConfigError("head_lr_mult must be positive", field="train.head_lr_mult")


def fit(params: ClassifierParams, scenes: Sequence, fusion: FusionConfig, train: TrainConfig,
        log=None) -> List[LossBreakdown]:
    """Run ``train.steps`` SGD steps over shuffled mini-batches; returns the loss curve."""
    if not scenes:
        raise ShapeError("no training scenes")
    rng = np.random.default_rng(train.seed)
    n = len(params.tensors())
    mult = [1.0] * (n - 2) + [train.head_lr_mult] * 2  # last conv (the 1x1 head) kernel + bias
    opt = nx.SGD(params.tensors(), lr=train.lr, momentum=train.momentum, lr_mult=mult)
    order: List[int] = []
    curve = []
    for step in range(train.steps):
        batch = []
        while len(batch) < min(train.batch_size, len(scenes)):
            if not order:
                order = list(rng.permutation(len(scenes)))
            batch.append(scenes[order.pop()])
        _, br = train_step(params, batch, fusion, opt)
        curve.append(br)
        if log is not None:
            log(step, br)
    return curve
