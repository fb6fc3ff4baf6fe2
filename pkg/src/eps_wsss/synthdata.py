"""Synthetic scenes with co-occurring context and biased saliency.

A scene holds a 3-channel image (colours in [0, 1] shifted by -0.5 so
mid-grey is zero), a ground-truth label mask (0 = background,
1..C = classes), a context mask (0 = none, 1..K = context kinds), a saliency
map in [0, 1] and the image-level label vector. Context regions are glued to
object instances by co-occurrence rules and never overlap objects, so every
context pixel is background in the label mask.

Everything is a pure function of (config, index).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict, fields
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .formats import (atomic_write_text, config_hash, read_epsf, read_pgm,
                      write_epsf, write_pgm)

SHAPES = ("disc", "square", "triangle", "bar")
CONTEXT_KINDS = ("stripes", "flat")
FORMAT_VERSION = 1

# per-class RGB signature and texture amplitude; classes past the table get generated colours
_CLASS_COLOURS = [(0.90, 0.30, 0.20), (0.20, 0.80, 0.30), (0.30, 0.30, 0.90), (0.85, 0.80, 0.20)]
_BACKGROUND = (0.15, 0.15, 0.15)
_CONTEXT_COLOURS = {
    "stripes": ((0.75, 0.55, 0.10), (0.10, 0.10, 0.10)),
    "flat": ((0.10, 0.45, 0.75), (0.10, 0.45, 0.75)),
}


@dataclass
class CooccurrenceRule:
    cls: int  # mask label, 1..C
    context: int  # context label, 1..K
    prob: float = 1.0
    geometry: str = "below"
    thickness: int = 6

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ConfigError(f"co-occurrence probability {self.prob} outside [0, 1]",
                              field="scene.cooccurrence.prob")
        if self.geometry != "below":
            raise ConfigError(f"unsupported context geometry {self.geometry!r}",
                              field="scene.cooccurrence.geometry")
        if self.thickness < 1:
            raise ConfigError("context thickness must be positive", field="scene.cooccurrence.thickness")


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 3
    shapes: List[str] = field(default_factory=lambda: ["disc", "square", "triangle"])
    contexts: List[str] = field(default_factory=lambda: ["stripes", "flat"])
    cooccurrence: List[CooccurrenceRule] = field(default_factory=list)
    drop_prob: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    blob_rate: float = 0.0
    blob_radius: int = 2
    instances: Tuple[int, int] = (1, 3)
    size_range: Tuple[int, int] = (10, 16)
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.cooccurrence = [r if isinstance(r, CooccurrenceRule) else CooccurrenceRule(**r)
                             for r in self.cooccurrence]
        self.shapes, self.contexts = list(self.shapes), list(self.contexts)
        self.drop_prob = [float(p) for p in self.drop_prob]
        self.instances, self.size_range = tuple(self.instances), tuple(self.size_range)
        if self.height < 16 or self.width < 16:
            raise ConfigError("scenes must be at least 16x16", field="scene.height")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive", field="scene.num_classes")
        if len(self.shapes) != self.num_classes:
            raise ConfigError(f"need {self.num_classes} shapes, got {len(self.shapes)}", field="scene.shapes")
        bad = [s for s in self.shapes if s not in SHAPES]
        if bad:
            raise ConfigError(f"unknown shapes {bad}; expected {SHAPES}", field="scene.shapes")
        bad = [k for k in self.contexts if k not in CONTEXT_KINDS]
        if bad:
            raise ConfigError(f"unknown context kinds {bad}", field="scene.contexts")
        if len(self.drop_prob) != self.num_classes:
            raise ConfigError(f"need {self.num_classes} drop probabilities", field="scene.drop_prob")
        if any(not 0.0 <= p <= 1.0 for p in self.drop_prob):
            raise ConfigError("drop probabilities must lie in [0, 1]", field="scene.drop_prob")
        if self.blob_rate < 0:
            raise ConfigError("blob_rate must be non-negative", field="scene.blob_rate")
        lo, hi = self.instances
        if not 1 <= lo <= hi:
            raise ConfigError("instances must satisfy 1 <= min <= max", field="scene.instances")
        smin, smax = self.size_range
        if not 2 <= smin <= smax:
            raise ConfigError("size_range must satisfy 2 <= min <= max", field="scene.size_range")
        for r in self.cooccurrence:
            if not 1 <= r.cls <= self.num_classes:
                raise ConfigError(f"rule class {r.cls} out of range", field="scene.cooccurrence.cls")
            if not 1 <= r.context <= len(self.contexts):
                raise ConfigError(f"rule context {r.context} out of range", field="scene.cooccurrence.context")
        thick = max((r.thickness for r in self.cooccurrence), default=0)
        if smax + thick + 2 > self.height or smax + 2 > self.width:
            raise ConfigError(f"objects of size {smax} with context {thick} cannot fit in "
                              f"{self.height}x{self.width}", field="scene.size_range")

    @property
    def num_contexts(self) -> int:
        return len(self.contexts)

    def to_dict(self):
        d = asdict(self)
        d["instances"] = list(self.instances)
        d["size_range"] = list(self.size_range)
        return d

    @classmethod
    def from_dict(cls, d, prefix="scene"):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown keys {unknown}", field=f"{prefix}.{unknown[0]}")
        rules = d.get("cooccurrence", [])
        rule_keys = {f.name for f in fields(CooccurrenceRule)}
        for r in rules:
            extra = sorted(set(r) - rule_keys)
            if extra:
                raise ConfigError(f"unknown keys {extra}", field=f"{prefix}.cooccurrence.{extra[0]}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc), field=prefix) from exc


def preset(name: str, seed: int = 0) -> SceneConfig:
    """Named scene presets.

    railroad: square (label 2) always sits on stripes, disc (label 1) on a
    flat region 90% of the time. sofa: same scenes, but saliency misses
    triangles (label 3) 80% of the time and picks up stray blobs.
    """
    rules = [CooccurrenceRule(cls=2, context=1, prob=1.0), CooccurrenceRule(cls=1, context=2, prob=0.9)]
    if name == "railroad":
        return SceneConfig(cooccurrence=rules, seed=seed)
    if name == "sofa":
        return SceneConfig(cooccurrence=rules, drop_prob=[0.0, 0.0, 0.8], blob_rate=0.5, seed=seed)
    raise ConfigError(f"unknown scene preset {name!r}; expected railroad or sofa", field="preset")


@dataclass
class Scene:
    image: np.ndarray  # 3 x H x W
    gt_mask: np.ndarray  # H x W, 0..C
    context_mask: np.ndarray  # H x W, 0..K
    saliency: np.ndarray  # H x W in [0, 1]
    labels: np.ndarray  # C, {0, 1}

    def equals(self, other: "Scene") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("image", "gt_mask", "context_mask", "saliency", "labels"))


def labels_from_mask(gt_mask, num_classes) -> np.ndarray:
    present = np.zeros(num_classes)
    for c in np.unique(gt_mask):
        if c > 0:
            present[int(c) - 1] = 1.0
    return present


def _shape_mask(shape: str, size: int) -> np.ndarray:
    r, c = np.mgrid[0:size, 0:size] + 0.5
    half = size / 2.0
    if shape == "disc":
        return (r - half) ** 2 + (c - half) ** 2 <= half ** 2
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "triangle":
        return np.abs(c - half) <= half * r / size
    if shape == "bar":
        return np.abs(r - half) <= size / 6.0
    raise ConfigError(f"unknown shape {shape!r}", field="scene.shapes")


def _class_colour(k: int):
    if k - 1 < len(_CLASS_COLOURS):
        return _CLASS_COLOURS[k - 1]
    g = np.random.default_rng(1000 + k).uniform(0.1, 0.9, size=3)
    return tuple(float(v) for v in g)


def _render(cfg: SceneConfig, gt, ctx, rng) -> np.ndarray:
    h, w = gt.shape
    img = np.empty((3, h, w))
    img[:] = np.asarray(_BACKGROUND)[:, None, None]
    rows = np.arange(h)[:, None] * np.ones((1, w))
    cols = np.ones((h, 1)) * np.arange(w)[None, :]
    for kind_idx, kind in enumerate(cfg.contexts, start=1):
        sel = ctx == kind_idx
        if not sel.any():
            continue
        on, off = _CONTEXT_COLOURS[kind]
        band = (rows % 4) < 2 if kind == "stripes" else np.ones_like(rows, dtype=bool)
        for ch in range(3):
            img[ch][sel] = np.where(band[sel], on[ch], off[ch])
    for k in range(1, cfg.num_classes + 1):
        sel = gt == k
        if not sel.any():
            continue
        colour = _class_colour(k)
        # light per-class checker texture, different period per class
        period = 2 + (k % 3)
        tex = 0.08 * (((rows // period + cols // period) % 2) * 2 - 1)
        for ch in range(3):
            img[ch][sel] = colour[ch] + tex[sel]
    img += rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    # centre on mid-grey; zero-mean inputs train much faster under plain SGD
    return img - 0.5


def inject_saliency_bias(saliency, gt_mask, drop_prob, blob_rate, rng, blob_radius=2) -> np.ndarray:
    """Drop whole object instances and add spurious salient blobs.

    Each connected instance of class k is zeroed with probability
    ``drop_prob[k-1]``; then Poisson(``blob_rate``) discs of ``blob_radius``
    are set to 1 on background (label 0) pixels.
    """
    sal = np.array(saliency, dtype=np.float64, copy=True)
    gt_mask = np.asarray(gt_mask)
    if sal.shape != gt_mask.shape:
        raise DataError(f"saliency {sal.shape} and mask {gt_mask.shape} differ")
    for k in range(1, len(drop_prob) + 1):
        inst, n = ndimage.label(gt_mask == k)
        for j in range(1, n + 1):
            if rng.random() < drop_prob[k - 1]:
                sal[inst == j] = 0.0
    n_blobs = rng.poisson(blob_rate) if blob_rate > 0 else 0
    h, w = sal.shape
    rr, cc = np.mgrid[0:h, 0:w]
    for _ in range(n_blobs):
        cy, cx = rng.integers(0, h), rng.integers(0, w)
        disc = (rr - cy) ** 2 + (cc - cx) ** 2 <= blob_radius ** 2
        sal[disc & (gt_mask == 0)] = 1.0
    return sal


def generate_scene(cfg: SceneConfig, index: int) -> Scene:
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.height, cfg.width
    gt = np.zeros((h, w), dtype=np.int64)
    ctx = np.zeros((h, w), dtype=np.int64)
    occupied = np.zeros((h, w), dtype=bool)
    n_inst = int(rng.integers(cfg.instances[0], cfg.instances[1] + 1))
    placed = 0
    for _ in range(n_inst):
        k = int(rng.integers(1, cfg.num_classes + 1))
        size = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
        attached = [r for r in cfg.cooccurrence if r.cls == k and rng.random() < r.prob]
        thick = max((r.thickness for r in attached), default=0)
        rule = attached[0] if attached else None
        for _try in range(50):
            r0 = int(rng.integers(0, h - size - thick + 1))
            c0 = int(rng.integers(0, w - size + 1))
            # footprint incl. context band and a 1px margin
            fr0, fr1 = max(r0 - 1, 0), min(r0 + size + thick + 1, h)
            fc0 = max(c0 - 3 if rule else c0 - 1, 0)
            fc1 = min(c0 + size + (3 if rule else 1), w)
            if occupied[fr0:fr1, fc0:fc1].any():
                continue
            occupied[fr0:fr1, fc0:fc1] = True
            shape = _shape_mask(cfg.shapes[k - 1], size)
            gt[r0:r0 + size, c0:c0 + size][shape] = k
            if rule is not None:
                cb0, cb1 = max(c0 - 2, 0), min(c0 + size + 2, w)
                ctx[r0 + size:r0 + size + thick, cb0:cb1] = rule.context
            placed += 1
            break
    if placed == 0:
        raise DataError(f"scene {index}: no object could be placed")
    ctx[gt > 0] = 0

    image = _render(cfg, gt, ctx, rng).astype(np.float32).astype(np.float64)
    saliency = (gt > 0).astype(np.float64)
    saliency = inject_saliency_bias(saliency, gt, cfg.drop_prob, cfg.blob_rate, rng, cfg.blob_radius)
    return Scene(image, gt, ctx, saliency.astype(np.float32).astype(np.float64),
                 labels_from_mask(gt, cfg.num_classes))


def generate_scenes(cfg: SceneConfig, n: int, start: int = 0) -> List[Scene]:
    return [generate_scene(cfg, i) for i in range(start, start + n)]


# -------------------------------------------------------------- persistence

def scene_paths(directory, idx):
    base = os.path.join(os.fspath(directory), f"scene_{idx:05d}")
    return {"image": base + "_image.epsf", "gt": base + "_gt.pgm",
            "context": base + "_context.pgm", "saliency": base + "_saliency.epsf"}


def write_scene(directory, idx, scene: Scene):
    p = scene_paths(directory, idx)
    write_epsf(p["image"], scene.image)
    write_pgm(p["gt"], scene.gt_mask)
    write_pgm(p["context"], scene.context_mask)
    write_epsf(p["saliency"], scene.saliency)


def read_scene(directory, idx, num_classes) -> Scene:
    p = scene_paths(directory, idx)
    for key, path in p.items():
        if not os.path.exists(path):
            raise DataError(f"missing {key} file {path}", field=key)
    gt = read_pgm(p["gt"])
    return Scene(read_epsf(p["image"]), gt, read_pgm(p["context"]), read_epsf(p["saliency"]),
                 labels_from_mask(gt, num_classes))


def dataset_manifest(cfg: SceneConfig, n: int) -> dict:
    conf = cfg.to_dict()
    return {"format_version": FORMAT_VERSION, "n": n, "seed": cfg.seed,
            "config": conf, "config_hash": config_hash(conf)}


def generate_dataset(cfg: SceneConfig, n: int, out_dir) -> dict:
    if n < 1:
        raise ConfigError("dataset size must be at least 1", field="n")
    out_dir = os.fspath(out_dir)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out_dir}: {exc}", field="out") from exc
    if not os.access(out_dir, os.W_OK):
        raise DataError(f"{out_dir} is not writable", field="out")
    for i in range(n):
        write_scene(out_dir, i, generate_scene(cfg, i))
    manifest = dataset_manifest(cfg, n)
    atomic_write_text(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(directory) -> dict:
    path = os.path.join(os.fspath(directory), "manifest.json")
    try:
        with open(path, encoding="utf-8") as fh:
            m = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"no manifest.json in {directory}", field="manifest") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest is not valid JSON: {exc.msg}", field="manifest") from exc
    if not isinstance(m, dict):
        raise DataError("manifest must be a JSON object", field="manifest")
    expected = {"format_version": int, "n": int, "seed": int, "config": dict, "config_hash": str}
    for key, typ in expected.items():
        if key not in m:
            raise DataError(f"manifest lacks {key!r}", field=key)
        if not isinstance(m[key], typ) or (typ is int and isinstance(m[key], bool)):
            raise DataError(f"manifest field {key!r} has wrong type", field=key)
    if m["format_version"] != FORMAT_VERSION:
        raise DataError(f"unsupported format_version {m['format_version']}", field="format_version")
    if m["n"] < 1:
        raise DataError("manifest n must be >= 1", field="n")
    if config_hash(m["config"]) != m["config_hash"]:
        raise DataError("config_hash does not match the recorded config", field="config_hash")
    return m


def load_dataset(directory, expected: Optional[SceneConfig] = None):
    """Return (SceneConfig, scenes). ``expected`` must hash to the manifest's config."""
    m = read_manifest(directory)
    if expected is not None and config_hash(expected.to_dict()) != m["config_hash"]:
        raise DataError("dataset was generated from a different config", field="config_hash")
    try:
        cfg = SceneConfig.from_dict(m["config"], prefix="config")
    except ConfigError as exc:
        raise DataError(str(exc), field=exc.field) from exc
    scenes = [read_scene(directory, i, cfg.num_classes) for i in range(m["n"])]
    return cfg, scenes
