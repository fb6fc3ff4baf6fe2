"""Command line driver: generate, train, infer, evaluate, study.

Every command is a pure function of its resolved RunConfig (plus input
files). Each writes a ``run_manifest.json`` next to its outputs holding the
config echo, its hash, output checksums, metrics and the wall-clock time;
the wall-clock entry is the only field that varies between identical runs.

Exit status: 0 success, 1 usage or config error, 2 data or runtime error.
Errors go to stderr as one line, ``kind: [field=...:] message``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import epscore as ec
from . import metrics as mt
from . import model as md
from . import pseudomask as pm
from . import synthdata as sd
from .errors import ConfigError, DataError, EPSError
from .formats import atomic_write_text, config_hash, file_sha256, read_pgm, write_pgm

log = logging.getLogger("eps_wsss")

STUDIES = ("selection_ablation", "cooccurrence", "boundary")


@dataclass
class EvalConfig:
    # (context label k, mask label c) pairs for the confusion ratio
    pairs: List[Tuple[int, int]] = field(default_factory=lambda: [(1, 2), (2, 1)])
    tolerance: float = 2.0

    def __post_init__(self):
        try:
            self.pairs = [(int(k), int(c)) for k, c in self.pairs]
        except (TypeError, ValueError) as exc:
            raise ConfigError("pairs must be a list of [context, class] pairs", field="evaluation.pairs") from exc
        if self.tolerance < 0:
            raise ConfigError("tolerance must be non-negative", field="evaluation.tolerance")


@dataclass
class RunConfig:
    scene: sd.SceneConfig = field(default_factory=sd.SceneConfig)
    n: int = 64
    model: md.ClassifierConfig = field(default_factory=md.ClassifierConfig)
    fusion: ec.FusionConfig = field(default_factory=ec.FusionConfig)
    train: ec.TrainConfig = field(default_factory=ec.TrainConfig)
    inference: pm.InferenceConfig = field(default_factory=pm.InferenceConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("n must be at least 1", field="n")
        if self.model.num_classes != self.scene.num_classes:
            raise ConfigError(f"model has {self.model.num_classes} classes, scenes have {self.scene.num_classes}",
                              field="model.num_classes")
        self.apply_seed(self.seed)

    def apply_seed(self, seed: int):
        """One master seed drives scene generation, initialisation and batch order."""
        self.seed = int(seed)
        self.scene.seed = self.model.seed = self.train.seed = self.seed
        return self

    def to_dict(self) -> dict:
        return {
            "scene": self.scene.to_dict(),
            "n": self.n,
            "model": self.model.to_dict(),
            "fusion": {**asdict(self.fusion), "predefined": list(self.fusion.predefined)},
            "train": asdict(self.train),
            "inference": {**asdict(self.inference), "scales": list(self.inference.scales)},
            "evaluation": {"pairs": [list(p) for p in self.evaluation.pairs],
                           "tolerance": self.evaluation.tolerance},
            "seed": self.seed,
        }

    def hash(self) -> str:
        return config_hash(self.to_dict())


_SECTIONS = {
    "model": md.ClassifierConfig,
    "fusion": ec.FusionConfig,
    "train": ec.TrainConfig,
    "inference": pm.InferenceConfig,
    "evaluation": EvalConfig,
}


def _section(cls, d, name):
    if not isinstance(d, dict):
        raise ConfigError(f"section {name!r} must be an object", field=name)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown keys {unknown}", field=f"{name}.{unknown[0]}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(str(exc), field=name) from exc


def run_config_from_dict(d: dict, base: Optional[RunConfig] = None) -> RunConfig:
    """Overlay a (partial) JSON config on ``base``; unknown keys are rejected."""
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object", field="config")
    base = base or RunConfig()
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown keys {unknown}", field=unknown[0])
    cur = base.to_dict()
    # section seeds are echoed in written configs; they must agree with the master seed
    master = d.get("seed", cur["seed"])
    for name in ("scene",) + tuple(_SECTIONS):
        if isinstance(d.get(name), dict) and d[name].get("seed", master) != master:
            raise ConfigError("seeds are set once, at the top level", field=f"{name}.seed")
    kw = {}
    scene = d.get("scene")
    if isinstance(scene, str):
        kw["scene"] = sd.preset(scene)
    elif scene is not None:
        if not isinstance(scene, dict):
            raise ConfigError("scene must be a preset name or an object", field="scene")
        kw["scene"] = sd.SceneConfig.from_dict({**cur["scene"], **scene})
    else:
        kw["scene"] = sd.SceneConfig.from_dict(cur["scene"])
    for name, cls in _SECTIONS.items():
        kw[name] = _section(cls, {**cur[name], **d.get(name, {})}, name)
    for name in ("n", "seed"):
        v = d.get(name, cur[name])
        if not isinstance(v, int) or isinstance(v, bool):
            raise ConfigError(f"{name} must be an integer", field=name)
        kw[name] = v
    return RunConfig(**kw)


def load_run_config(path, base: Optional[RunConfig] = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found", field="config") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc.msg} at line {exc.lineno}", field="config") from exc
    return run_config_from_dict(d, base)


# ------------------------------------------------------------------ outputs

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def write_csv(path, header, rows):
    atomic_write_text(path, csv_text(header, rows))


def read_csv(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {path}: {exc.strerror}", field="out") from exc
    if not os.access(path, os.W_OK):
        raise DataError(f"{path} is not writable", field="out")


def _checksums(directory, names) -> Dict[str, str]:
    return {n: file_sha256(os.path.join(directory, n)) for n in sorted(names)}


def write_run_manifest(directory, command, cfg: RunConfig, artifacts, metrics, started, extra=None):
    m = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "artifacts": _checksums(directory, artifacts),
        "metrics": metrics,
        "wall_clock_s": round(time.time() - started, 3),
    }
    if extra:
        m.update(extra)
    atomic_write_text(os.path.join(directory, "run_manifest.json"),
                      json.dumps(m, indent=2, sort_keys=True, allow_nan=True) + "\n")
    return m


def _finite(x):
    return None if x is None or not np.isfinite(x) else float(x)


# ----------------------------------------------------------------- pipeline

def train_model(cfg: RunConfig, scenes) -> Tuple[md.ClassifierParams, List[ec.LossBreakdown]]:
    params = md.init_params(cfg.model)

    def progress(step, br):
        if (step + 1) % 100 == 0:
            log.info("step %d  L_cls %.4f  L_sal %.4f  L_total %.4f", step + 1, br.cls, br.sal, br.total)

    curve = ec.fit(params, scenes, cfg.fusion, cfg.train, log=progress)
    return params, curve


def loss_rows(curve):
    return [(i, br.sal, br.cls, br.total) for i, br in enumerate(curve)]


LOSS_HEADER = ("step", "l_sal", "l_cls", "l_total")


def mask_name(idx: int) -> str:
    return f"mask_{idx:05d}.pgm"


def infer_masks(params, scenes, icfg: pm.InferenceConfig) -> List[np.ndarray]:
    if params.num_classes != len(scenes[0].labels):
        raise ConfigError(f"checkpoint predicts {params.num_classes} classes, dataset has {len(scenes[0].labels)}",
                          field="checkpoint")
    return [pm.pseudo_mask(params, s.image, s.labels, icfg) for s in scenes]


def metric_rows(rep: mt.EvaluationReport):
    rows = [("iou", c, "", v) for c, v in enumerate(rep.miou.iou)]
    rows.append(("miou", "", "", rep.miou.mean))
    b = rep.boundary
    rows += [("boundary_recall", "", "", b.recall), ("boundary_precision", "", "", b.precision),
             ("boundary_f1", "", "", b.f1)]
    for r in rep.confusion:
        rows += [("confusion_m", r.target, r.context, r.m), ("confusion_fp", r.target, r.context, r.fp),
                 ("confusion_tp", r.target, r.context, r.tp), ("target_iou", r.target, r.context, r.iou)]
    return rows


METRIC_HEADER = ("metric", "class", "context", "value")


def metric_summary(rep: mt.EvaluationReport) -> dict:
    return {
        "iou": [_finite(v) for v in rep.miou.iou],
        "miou": _finite(rep.miou.mean),
        "boundary": {"recall": rep.boundary.recall, "precision": rep.boundary.precision, "f1": rep.boundary.f1},
        "confusion": [{"context": r.context, "target": r.target, "fp": r.fp, "tp": r.tp,
                       "m": _finite(r.m), "iou": _finite(r.iou)} for r in rep.confusion],
    }


def evaluate_masks(preds, scenes, cfg: RunConfig) -> mt.EvaluationReport:
    return mt.evaluate(preds, scenes, len(scenes[0].labels), cfg.evaluation.pairs, cfg.evaluation.tolerance)


# ----------------------------------------------------------------- commands

def cmd_generate(cfg: RunConfig, out):
    started = time.time()
    _ensure_dir(out)
    manifest = sd.generate_dataset(cfg.scene, cfg.n, out)
    names = ["manifest.json"] + [os.path.basename(p) for i in range(cfg.n)
                                 for p in sd.scene_paths(out, i).values()]
    write_run_manifest(out, "generate", cfg, names, {"n": cfg.n}, started,
                       {"dataset_hash": manifest["config_hash"]})
    return manifest


def _load(dataset, cfg: RunConfig):
    scene_cfg, scenes = sd.load_dataset(dataset)
    if scene_cfg.num_classes != cfg.model.num_classes:
        raise ConfigError(f"dataset has {scene_cfg.num_classes} classes, model expects {cfg.model.num_classes}",
                          field="model.num_classes")
    return scene_cfg, scenes


def cmd_train(cfg: RunConfig, dataset, out):
    started = time.time()
    scene_cfg, scenes = _load(dataset, cfg)
    _ensure_dir(out)
    params, curve = train_model(cfg, scenes)
    md.save_checkpoint(params, os.path.join(out, "model.ckpt"))
    write_csv(os.path.join(out, "loss_curve.csv"), LOSS_HEADER, loss_rows(curve))
    atomic_write_text(os.path.join(out, "config.json"), json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    final = curve[-1] if curve else None
    metrics = {"steps": len(curve), "final_loss": None if final is None else asdict(final)}
    write_run_manifest(out, "train", cfg, ["model.ckpt", "loss_curve.csv", "config.json"], metrics, started,
                       {"dataset_hash": config_hash(scene_cfg.to_dict())})
    return params, curve


def cmd_infer(cfg: RunConfig, checkpoint, dataset, out):
    started = time.time()
    params = md.load_checkpoint(checkpoint)
    scene_cfg, scenes = sd.load_dataset(dataset)
    _ensure_dir(out)
    preds = infer_masks(params, scenes, cfg.inference)
    for i, p in enumerate(preds):
        write_pgm(os.path.join(out, mask_name(i)), p)
    write_run_manifest(out, "infer", cfg, [mask_name(i) for i in range(len(preds))], {"masks": len(preds)}, started,
                       {"checkpoint_sha256": file_sha256(checkpoint),
                        "dataset_hash": config_hash(scene_cfg.to_dict())})
    return preds


def cmd_evaluate(cfg: RunConfig, masks, dataset, out):
    started = time.time()
    scene_cfg, scenes = sd.load_dataset(dataset)
    preds = []
    for i in range(len(scenes)):
        path = os.path.join(masks, mask_name(i))
        if not os.path.exists(path):
            raise DataError(f"missing pseudo-mask {path}", field="masks")
        preds.append(read_pgm(path))
    rep = evaluate_masks(preds, scenes, cfg)
    out_dir = os.path.dirname(os.path.abspath(out))
    _ensure_dir(out_dir)
    write_csv(out, METRIC_HEADER, metric_rows(rep))
    write_run_manifest(out_dir, "evaluate", cfg, [os.path.basename(out)], metric_summary(rep), started,
                       {"dataset_hash": config_hash(scene_cfg.to_dict())})
    return rep


# -------------------------------------------------------------------- study

# Studies train with the single-run defaults unless a preset must fit a short
# time budget; FAST_TRAIN halves the batch and doubles the learning rate so one
# arm converges in about two CPU minutes. --config can override either.
FAST_TRAIN = {"batch_size": 4, "lr": 0.02}
CAM_BACKGROUND = 0.2  # constant background score for the classification-only arm


@dataclass
class Arm:
    name: str
    fusion: dict
    inference: dict = field(default_factory=dict)


@dataclass
class StudyPreset:
    name: str
    scene: str
    seeds: Tuple[int, ...]
    arms: Tuple[Arm, ...]
    train: dict = field(default_factory=dict)


def _eps_arm(strategy="adaptive", **kw):
    return Arm(strategy, {"strategy": strategy, "loss": "cls+sal", **kw})


CAM = Arm("CAM", {"loss": "cls_only"}, {"background": CAM_BACKGROUND})
EPS = Arm("EPS", {"strategy": "adaptive", "loss": "cls+sal"})

STUDY_PRESETS = {
    "cooccurrence": StudyPreset("cooccurrence", "railroad", (0,), (CAM, EPS), FAST_TRAIN),
    "boundary": StudyPreset("boundary", "railroad", (0, 1, 2), (CAM, EPS)),
    # the predefined arm pushes the class whose saliency is unreliable (mask label 3, channel 2)
    "selection_ablation": StudyPreset("selection_ablation", "sofa", (0, 1, 2), (
        _eps_arm("baseline"), _eps_arm("naive"), _eps_arm("predefined", predefined=[2]), _eps_arm("adaptive"))),
}


def study_preset(name: str) -> StudyPreset:
    if name not in STUDY_PRESETS:
        raise ConfigError(f"unknown study {name!r}; expected one of {STUDIES}", field="preset")
    return STUDY_PRESETS[name]


def study_arm_config(preset: StudyPreset, arm: Arm, seed: int, overrides: Optional[dict] = None) -> RunConfig:
    d = {"scene": preset.scene, "train": dict(preset.train), "fusion": dict(arm.fusion),
         "inference": dict(arm.inference), "seed": seed}
    for key, val in (overrides or {}).items():
        if isinstance(val, dict) and isinstance(d.get(key), dict):
            d[key] = {**d[key], **val}
        else:
            d[key] = val
    # arm-defining settings always win over overrides
    d["fusion"].update(arm.fusion)
    d["inference"].update(arm.inference)
    d["seed"] = seed
    return run_config_from_dict(d)


def _mean(xs):
    xs = [x for x in xs if x is not None and np.isfinite(x)]
    return float(np.mean(xs)) if xs else float("nan")


def study_table(preset: StudyPreset, results: Dict[str, List[mt.EvaluationReport]]):
    arms = [a.name for a in preset.arms]
    if preset.name == "selection_ablation":
        header = ("strategy", "miou")
        rows = [(a, _mean([r.miou.mean for r in results[a]])) for a in arms]
    elif preset.name == "boundary":
        header = ("method", "recall", "precision", "f1")
        rows = [(a, _mean([r.boundary.recall for r in results[a]]), _mean([r.boundary.precision for r in results[a]]),
                 _mean([r.boundary.f1 for r in results[a]])) for a in arms]
    else:
        header = ("method", "context", "target", "m", "iou", "entry")
        rows = []
        for a in arms:
            for j, pair in enumerate(results[a][0].confusion):
                m = _mean([r.confusion[j].m for r in results[a]])
                iou = _mean([r.confusion[j].iou for r in results[a]])
                rows.append((a, pair.context, pair.target, m, iou, f"{m:.2f} ({100 * iou:.1f})"))
    return header, rows


RUNS_HEADER = ("arm", "seed", "miou", "boundary_recall", "boundary_precision", "boundary_f1",
               "context", "target", "m", "target_iou", "final_loss")


def cmd_study(name: str, out, overrides: Optional[dict] = None, seed: Optional[int] = None):
    started = time.time()
    preset = study_preset(name)
    seeds = preset.seeds if seed is None else tuple(seed + i for i in range(len(preset.seeds)))
    _ensure_dir(out)
    results: Dict[str, List[mt.EvaluationReport]] = {a.name: [] for a in preset.arms}
    run_rows, artifacts, timings = [], [], {}
    for s in seeds:
        data_dir = os.path.join(out, f"data_seed{s}")
        first = study_arm_config(preset, preset.arms[0], s, overrides)
        cmd_generate(first, data_dir)
        _, scenes = sd.load_dataset(data_dir)
        for arm in preset.arms:
            t0 = time.time()
            cfg = study_arm_config(preset, arm, s, overrides)
            run_dir = os.path.join(out, f"{arm.name}_seed{s}")
            _ensure_dir(run_dir)
            log.info("study %s: arm %s seed %d", name, arm.name, s)
            params, curve = train_model(cfg, scenes)
            md.save_checkpoint(params, os.path.join(run_dir, "model.ckpt"))
            write_csv(os.path.join(run_dir, "loss_curve.csv"), LOSS_HEADER, loss_rows(curve))
            atomic_write_text(os.path.join(run_dir, "config.json"),
                              json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
            preds = infer_masks(params, scenes, cfg.inference)
            for i, p in enumerate(preds):
                write_pgm(os.path.join(run_dir, mask_name(i)), p)
            rep = evaluate_masks(preds, scenes, cfg)
            write_csv(os.path.join(run_dir, "metrics.csv"), METRIC_HEADER, metric_rows(rep))
            names = ["model.ckpt", "loss_curve.csv", "config.json", "metrics.csv"] + \
                [mask_name(i) for i in range(len(preds))]
            write_run_manifest(run_dir, "study-arm", cfg, names, metric_summary(rep), t0)
            results[arm.name].append(rep)
            timings[f"{arm.name}_seed{s}"] = round(time.time() - t0, 3)
            artifacts.append(os.path.join(f"{arm.name}_seed{s}", "metrics.csv"))
            final = curve[-1].total if curve else float("nan")
            for r in rep.confusion or [None]:
                run_rows.append((arm.name, s, rep.miou.mean, rep.boundary.recall, rep.boundary.precision,
                                 rep.boundary.f1, "" if r is None else r.context, "" if r is None else r.target,
                                 "" if r is None else r.m, "" if r is None else r.iou, final))
    header, rows = study_table(preset, results)
    write_csv(os.path.join(out, f"{name}.csv"), header, rows)
    write_csv(os.path.join(out, "study_runs.csv"), RUNS_HEADER, run_rows)
    base = study_arm_config(preset, preset.arms[-1], seeds[0], overrides)
    write_run_manifest(out, f"study:{name}", base, [f"{name}.csv", "study_runs.csv"] + artifacts,
                       {"table": [dict(zip(header, [_finite(v) if isinstance(v, float) else v for v in r]))
                                  for r in rows]},
                       started, {"seeds": list(seeds), "arms": [asdict(a) for a in preset.arms],
                                 "arm_wall_clock_s": timings})
    return header, rows, results


# ---------------------------------------------------------------------- CLI

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message, field="usage")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eps-wsss", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, preset_help=None):
        sp.add_argument("--config", help="JSON run config; keys not given keep their defaults")
        sp.add_argument("--out", required=True, help="output path")
        sp.add_argument("--seed", type=int, help="master seed, overrides the config")
        if preset_help:
            sp.add_argument("--preset", help=preset_help)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    common(g, "scene preset: railroad or sofa")
    g.add_argument("--n", type=int, help="number of scenes, overrides the config")

    t = sub.add_parser("train", help="train a classifier on a dataset")
    common(t)
    t.add_argument("--dataset", required=True)

    i = sub.add_parser("infer", help="pseudo-masks from a checkpoint")
    common(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--dataset", required=True)

    e = sub.add_parser("evaluate", help="score pseudo-masks against a dataset")
    common(e)
    e.add_argument("--masks", required=True)
    e.add_argument("--dataset", required=True)

    s = sub.add_parser("study", help="multi-arm comparison study")
    common(s, f"one of {', '.join(STUDIES)}")
    return p


def _resolve(args) -> RunConfig:
    base = RunConfig()
    if args.command == "generate" and args.preset:
        base = run_config_from_dict({"scene": args.preset}, base)
    cfg = load_run_config(args.config, base) if args.config else base
    if getattr(args, "n", None) is not None:
        cfg = run_config_from_dict({"n": args.n}, cfg)
    if args.seed is not None:
        cfg.apply_seed(args.seed)
    return cfg


def _read_overrides(path) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found", field="config") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc.msg}", field="config") from exc
    run_config_from_dict(d)  # validate keys and values up front
    if "seed" in d:
        raise ConfigError("study seeds come from the preset or --seed", field="seed")
    return d


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    if args.command == "study":
        if not args.preset:
            raise ConfigError("study needs --preset", field="preset")
        header, rows, _ = cmd_study(args.preset, args.out, _read_overrides(args.config), args.seed)
        sys.stdout.write(csv_text(header, rows))
        return 0
    cfg = _resolve(args)
    if args.command == "generate":
        cmd_generate(cfg, args.out)
    elif args.command == "train":
        cmd_train(cfg, args.dataset, args.out)
    elif args.command == "infer":
        cmd_infer(cfg, args.checkpoint, args.dataset, args.out)
    else:
        rep = cmd_evaluate(cfg, args.masks, args.dataset, args.out)
        sys.stdout.write(csv_text(METRIC_HEADER, metric_rows(rep)))
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        return run(argv)
    except EPSError as exc:
        print(exc.one_line(), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"io_error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2
    except Exception as exc:  # last resort: still one line, still a runtime failure
        print(f"internal_error: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2
