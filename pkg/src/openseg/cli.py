"""Command-line driver: synth -> fit -> score -> evaluate pipelines.

Every run directory gets a ``run.json`` echoing the resolved
configuration and seed; outputs are written atomically (``.partial``
then rename) so an interrupted run never leaves a truncated artifact
without the suffix.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from scipy import stats as sps

from . import evaluation as ev
from . import openmax as om
from . import pca as pd_
from . import synth as sy
from . import tensor_store as ts
from .errors import ConfigError, MissingArtifact, OpensegError
from .fusion import LayerSpec
from .scorers import SCORERS, OpenFCNScorer, OpenIPCSScorer, OpenPCSScorer, SoftmaxScorer

TPR_GRID_DEFAULT = (0.1, 0.3, 0.5, 0.7, 0.9)


# --- small atomic-output helpers ---

def _atomic_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _atomic_json(path: Path, obj) -> None:
    _atomic_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _atomic_tensor(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    ts.write_tensor(tmp, arr)
    os.replace(tmp, path)


def write_pgm(path: Path, score: np.ndarray) -> None:
    """8-bit P5 rendering of a score map for quick inspection."""
    finite = score[np.isfinite(score)]
    lo, hi = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
    span = hi - lo if hi > lo else 1.0
    img = np.clip((score - lo) / span, 0.0, 1.0)
    img = np.nan_to_num(img, nan=0.0, posinf=1.0, neginf=0.0)
    data = (img * 255).astype(np.uint8)
    header = f"P5\n{score.shape[1]} {score.shape[0]}\n255\n".encode()
    _atomic_bytes(path, header + data.tobytes())


# --- scene loading and LOCO preparation ---

def load_scenes(scenes_dir) -> list[tuple[str, ts.Scene]]:
    root = Path(scenes_dir)
    if not root.is_dir():
        raise ConfigError(f"scene directory {root} does not exist")
    names = sorted(p.name for p in root.iterdir()
                   if p.is_dir() and (p / "scene.json").is_file())
    if not names:
        raise ConfigError(f"no scene directories under {root}")
    return [(n, ts.read_scene(root / n)) for n in names]


def prepare_loco(scene: ts.Scene, uuc: int | None):
    """Per-scene LOCO view: reduced logits, compacted train labels, split."""
    if uuc is None:
        n = scene.n_classes
        split = None
        return scene.logits, scene.labels, split
    split = ev.loco_remap(scene.labels, uuc, scene.n_classes)
    logits_known = np.delete(scene.logits, uuc, axis=0)
    train_labels = ev.remap_train_labels(scene.labels, split)
    return logits_known, train_labels, split


def _layer_spec_from_config(entries) -> list[LayerSpec] | None:
    if not entries:
        return None
    return [LayerSpec(layer=int(e["layer"]), scale=int(e["scale"]),
                      mode=e.get("mode", "nearest")) for e in entries]


def build_scorer(cfg: dict):
    method = cfg["method"]
    if method not in SCORERS:
        raise ConfigError(f"unknown method {method!r}")
    spec = _layer_spec_from_config(cfg.get("fusion"))
    if method == "softmax":
        return SoftmaxScorer()
    if method == "openfcn":
        return OpenFCNScorer(tail_size=cfg["tail_size"], distance_kind=cfg["distance"],
                             alpha=cfg["alpha"], quantile=cfg["quantile"],
                             cap=cfg["cap"], seed=cfg["seed"])
    if method == "openpcs":
        return OpenPCSScorer(layer_spec=spec, n_components=cfg["components"],
                             cap=cfg["cap"], seed=cfg["seed"])
    return OpenIPCSScorer(layer_spec=spec, n_components=cfg["components"],
                          batch_rows=cfg["batch_rows"], cap=cfg["cap"],
                          seed=cfg["seed"])


# --- stages ---

def stage_fit(cfg: dict) -> None:
    out = Path(cfg["out"])
    scenes = load_scenes(cfg["scenes"])
    prepared = [prepare_loco(s, cfg["uuc"]) for _, s in scenes]
    logits_list = [p[0] for p in prepared]
    train_labels = [p[1] for p in prepared]

    scorer = build_scorer(cfg)
    scorer.fit([s for _, s in scenes], train_labels=train_labels,
               logits_list=logits_list)

    out.mkdir(parents=True, exist_ok=True)
    if isinstance(scorer, OpenFCNScorer):
        tmp = out / "openfcn_models.json.partial"
        om.save_models(tmp, scorer.models_, scorer.config)
        os.replace(tmp, out / "openfcn_models.json")
    elif isinstance(scorer, (OpenPCSScorer, OpenIPCSScorer)):
        pd_.save_models(out / "pca_models", scorer.models_)
    _atomic_json(out / "run.json", cfg)


def _load_fitted(cfg: dict):
    out = Path(cfg["out"])
    method = cfg["method"]
    scorer = build_scorer(cfg)
    if method == "softmax":
        return scorer
    if method == "openfcn":
        path = out / "openfcn_models.json"
        if not path.is_file():
            raise MissingArtifact(f"no fitted models at {path}; run `openseg fit` first")
        scorer.models_, loaded_cfg = om.load_models(path)
        scorer.quantile = cfg["quantile"]
        return scorer
    path = out / "pca_models" / "pca_models.json"
    if not path.is_file():
        raise MissingArtifact(f"no fitted models at {path}; run `openseg fit` first")
    scorer.models_ = pd_.load_models(out / "pca_models")
    return scorer


def stage_score(cfg: dict) -> dict:
    out = Path(cfg["out"])
    scenes = load_scenes(cfg["scenes"])
    scorer = _load_fitted(cfg)

    def _one(item):
        name, scene = item
        logits, _, _ = prepare_loco(scene, cfg["uuc"])
        t0 = time.perf_counter()
        res = scorer.score_scene(scene, logits=logits)
        elapsed = time.perf_counter() - t0
        sdir = out / "scores" / name
        _atomic_tensor(sdir / "score.npy", res.score.astype(np.float32))
        _atomic_tensor(sdir / "prior.npy", res.prior.astype(np.int32))
        if res.posterior is not None:
            _atomic_tensor(sdir / "posterior.npy", res.posterior.astype(np.int32))
        if cfg.get("pgm"):
            write_pgm(sdir / "score.pgm", res.score)
        return name, elapsed, res.unscored_classes

    jobs = max(1, cfg.get("jobs", 1))
    if jobs == 1:
        results = [_one(item) for item in scenes]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one, scenes))
    results.sort(key=lambda r: r[0])

    lines = ["patch_id,seconds"] + [f"{n},{dt:.6f}" for n, dt, _ in results]
    _atomic_bytes(out / "timings.csv", ("\n".join(lines) + "\n").encode())
    unscored = sorted({c for _, _, u in results for c in u})
    _atomic_json(out / "run.json", cfg)
    return {"timings": [(n, dt) for n, dt, _ in results], "unscored": unscored}


def _report_entry(rep: ev.EvalReport) -> dict:
    return {
        "acc_known": rep.acc_known,
        "pre_unknown": rep.pre_unknown,
        "kappa": rep.kappa,
        "tpr_target": rep.tpr_target,
        "threshold": rep.threshold,
        "achieved_tpr": rep.achieved_tpr,
        "confusion": rep.confusion.tolist(),
    }


def stage_evaluate(cfg: dict) -> dict:
    out = Path(cfg["out"])
    if cfg["uuc"] is None:
        raise ConfigError("evaluate requires --uuc")
    scenes = load_scenes(cfg["scenes"])

    all_scores, all_labels, all_prior = [], [], []
    for name, scene in scenes:
        sdir = out / "scores" / name
        if not (sdir / "score.npy").is_file():
            raise MissingArtifact(f"no score map for scene {name}; run `openseg score` first")
        score = ts.read_tensor(sdir / "score.npy").astype(np.float64)
        prior = ts.read_tensor(sdir / "prior.npy")
        _, _, split = prepare_loco(scene, cfg["uuc"])
        all_scores.append(score.ravel())
        all_labels.append(split.eval_labels.ravel())
        all_prior.append(prior.ravel())
    n_known = split.n_known
    unknown_id = split.unknown_id
    scores = np.concatenate(all_scores)
    labels = np.concatenate(all_labels)
    prior = np.concatenate(all_prior)
    valid = labels != ts.IGNORE_LABEL
    unknown_mask = labels == unknown_id

    report = {
        "method": cfg["method"],
        "uuc": cfg["uuc"],
        "n_known": n_known,
        "seed": cfg["seed"],
        "n_scenes": len(scenes),
    }
    closed = ev.evaluate(prior, labels, unknown_mask, scores, n_known,
                         tpr_target=0.0, threshold=float("-inf"), achieved_tpr=0.0)
    report["auc"] = closed.auc
    report["closed"] = _report_entry(closed)

    per_tpr = []
    for tpr in cfg["tpr_grid"]:
        cal = ev.calibrate_threshold(scores, unknown_mask & valid, tpr)
        pred = ev.apply_threshold(scores, prior, cal.threshold, unknown_id)
        rep = ev.evaluate(pred, labels, unknown_mask, scores, n_known,
                          tpr_target=tpr, threshold=cal.threshold,
                          achieved_tpr=cal.achieved_tpr)
        per_tpr.append(_report_entry(rep))
    report["per_tpr"] = per_tpr

    curve, _ = ev.roc_auc(scores, unknown_mask, valid)
    roc_lines = ["fpr,tpr"] + [f"{fpr:.9f},{tpr:.9f}" for fpr, tpr in curve]
    _atomic_bytes(out / "roc.csv", ("\n".join(roc_lines) + "\n").encode())
    _atomic_json(out / "report.json", report)
    _atomic_json(out / "run.json", cfg)
    return report


def stage_pipeline(cfg: dict) -> dict:
    stage_fit(cfg)
    stage_score(cfg)
    return stage_evaluate(cfg)


def stage_bench(cfg: dict) -> dict:
    info = stage_score(cfg)
    times = np.array([dt for _, dt in info["timings"]])
    n = times.size
    mean = float(times.mean())
    if n > 1:
        half = float(sps.t.ppf(0.975, n - 1) * times.std(ddof=1) / np.sqrt(n))
    else:
        half = 0.0
    bench = {"method": cfg["method"], "n_patches": n, "mean_seconds": mean,
             "ci95_low": mean - half, "ci95_high": mean + half}
    _atomic_json(Path(cfg["out"]) / "bench.json", bench)
    return bench


def stage_synth(cfg: dict) -> None:
    sc = sy.SynthConfig(
        n_classes=cfg["classes"], height=cfg["size"], width=cfg["size"],
        separation=cfg["sep"], feature_noise=cfg["noise"],
        logit_noise=cfg["logit_noise"], logit_temperature=cfg["logit_temperature"],
        mode=cfg["mode"], seed=cfg["seed"],
    )
    out = Path(cfg["out"])
    for i, scene in enumerate(sy.generate_dataset(sc, cfg["n_scenes"])):
        ts.write_scene(out / f"scene_{i:03d}", scene)
    _atomic_json(out / "run.json", cfg)


# --- argument handling ---

def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="run directory for artifacts")


def _add_method(p):
    p.add_argument("--method", choices=sorted(SCORERS), default="openpcs")
    p.add_argument("--scenes", required=True, help="directory of scene subdirectories")
    p.add_argument("--uuc", type=int, default=None, help="held-out class id")
    p.add_argument("--components", type=int, default=16)
    p.add_argument("--cap", type=int, default=200_000)
    p.add_argument("--tail-size", type=int, default=2000, dest="tail_size")
    p.add_argument("--distance", choices=["euclidean", "cosine", "hybrid"],
                   default="euclidean")
    p.add_argument("--alpha", type=int, default=None)
    p.add_argument("--quantile", type=float, default=0.5)
    p.add_argument("--batch-rows", type=int, default=65_536, dest="batch_rows")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--pgm", action="store_true")
    p.add_argument("--tpr", default="0.1,0.3,0.5,0.7,0.9",
                   help="comma-separated TPR calibration grid")


_SUBPARSERS: dict[str, argparse.ArgumentParser] = {}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="openseg",
                                 description="Open-set segmentation scoring toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scenes")
    _SUBPARSERS["synth"] = p
    _add_common(p)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--sep", type=float, default=6.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--logit-noise", type=float, default=0.0, dest="logit_noise")
    p.add_argument("--logit-temperature", type=float, default=4.0,
                   dest="logit_temperature")
    p.add_argument("--mode", choices=["stripes", "blobs"], default="stripes")
    p.add_argument("--scenes", dest="n_scenes", type=int, default=1,
                   help="number of scenes to generate")

    for name in ("fit", "score", "evaluate", "pipeline", "bench"):
        p = sub.add_parser(name)
        _SUBPARSERS[name] = p
        _add_common(p)
        _add_method(p)
    return ap


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                cfg.update(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    subparser = _SUBPARSERS.get(args.command)
    for key, val in vars(args).items():
        if key in ("config", "command"):
            continue
        default = subparser.get_default(key) if subparser else None
        if key not in cfg or val != default:
            cfg[key] = val
    cfg["command"] = args.command
    if "tpr" in cfg:
        try:
            cfg["tpr_grid"] = [float(x) for x in str(cfg["tpr"]).split(",") if x]
        except ValueError as exc:
            raise ConfigError(f"bad --tpr grid {cfg['tpr']!r}") from exc
        if any(not 0.0 < t <= 1.0 for t in cfg["tpr_grid"]):
            raise ConfigError("TPR targets must lie in (0, 1]")
    if cfg.get("method") not in (None,) and cfg.get("method") not in SCORERS:
        raise ConfigError(f"unknown method {cfg.get('method')!r}")
    return cfg


STAGES = {
    "synth": stage_synth,
    "fit": stage_fit,
    "score": stage_score,
    "evaluate": stage_evaluate,
    "pipeline": stage_pipeline,
    "bench": stage_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        STAGES[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except OpensegError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
