"""Command-line entry point wiring the stages into one pipeline.

Subcommands: synth, ingest, attrmaps, extract, train, eval, saliency,
featviz, netinit, pipeline. Every stage reads and writes only documented
file formats, so ``pipeline`` is byte-identical to running the stage
commands by hand in order. Exit codes: 0 success, 2 configuration error,
3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__, attrmaps, cnn, evaluation, saliency, svm, synth
from .attrmaps import MAP_KINDS, AttributeMapSet
from .errors import (
    BadTensorShape,
    ConfigError,
    DataError,
    FacemapError,
    MissingFeature,
)
from .imageops import save_png_gray, save_png_rgb
from .scan import load_scan, preprocess, project, read_manifest, validate_scan
from .tensor import read_tensor, write_tensor


def _log(verbose, message):
    if verbose:
        print(message, file=sys.stderr)


def _map_jobs(fn, items, jobs):
    if jobs and jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(fn, items))
    else:
        for item in items:
            fn(item)


# --- stages ---

def run_synth(out_dir, subjects=12, seed=7, verbose=False) -> str:
    manifest = synth.write_benchmark(out_dir, n_subjects=subjects, seed=seed)
    _log(verbose, f"synth: wrote {subjects * 12} scans under {out_dir}")
    return manifest


def run_ingest(manifest_path, out_dir, size=128, crop=90.0, jobs=1,
               verbose=False) -> None:
    rows = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    os.makedirs(out_dir, exist_ok=True)

    def one(row):
        scan = load_scan(os.path.join(base, row.path))
        scan = validate_scan(scan)
        scan = preprocess(scan, crop_radius_mm=crop)
        geom, tex, mask = project(scan, size, size)
        write_tensor(os.path.join(out_dir, f"{row.scan_id}.geom.ftnsr"), geom)
        write_tensor(os.path.join(out_dir, f"{row.scan_id}.tex.ftnsr"), tex)
        write_tensor(os.path.join(out_dir, f"{row.scan_id}.mask.ftnsr"), mask)
        _log(verbose, f"ingest: {row.scan_id}")

    _map_jobs(one, rows, jobs)


def _scan_ids(directory, suffix):
    ids = [f[: -len(suffix)] for f in os.listdir(directory) if f.endswith(suffix)]
    return sorted(ids)


def run_attrmaps(in_dir, out_dir, window=attrmaps.DEFAULT_WINDOW, jobs=1,
                 verbose=False) -> None:
    os.makedirs(out_dir, exist_ok=True)
    ids = _scan_ids(in_dir, ".geom.ftnsr")
    if not ids:
        raise DataError(f"no .geom.ftnsr files under {in_dir}")

    def one(scan_id):
        geom = read_tensor(os.path.join(in_dir, f"{scan_id}.geom.ftnsr"))
        tex = read_tensor(os.path.join(in_dir, f"{scan_id}.tex.ftnsr"))
        mask = read_tensor(os.path.join(in_dir, f"{scan_id}.mask.ftnsr"))
        maps = attrmaps.compute_attribute_maps(geom, tex, mask, window=window)
        for kind in ("nx", "ny", "nz", "si"):
            values = getattr(maps, kind)
            write_tensor(os.path.join(out_dir, f"{scan_id}.{kind}.ftnsr"), values)
            save_png_gray(os.path.join(out_dir, f"{scan_id}.{kind}.png"),
                          attrmaps.normalize_map(values, maps.mask))
        write_tensor(os.path.join(out_dir, f"{scan_id}.vmask.ftnsr"), maps.mask)
        _log(verbose, f"attrmaps: {scan_id}")

    _map_jobs(one, ids, jobs)


def load_map_set(maps_dir, scan_id) -> AttributeMapSet:
    """Reassemble one scan's attribute maps from a stage directory."""
    def rd(kind):
        path = os.path.join(maps_dir, f"{scan_id}.{kind}.ftnsr")
        if not os.path.exists(path):
            raise MissingFeature(f"scan {scan_id}: missing {kind} map in {maps_dir}")
        return read_tensor(path)

    mask = rd("vmask")
    keep = mask[:, :, None]
    return AttributeMapSet(geom=rd("geom") * keep, tex=rd("tex") * keep,
                           si=rd("si"), nx=rd("nx"), ny=rd("ny"), nz=rd("nz"),
                           mask=mask)


def run_extract(model_dir, maps_dir, out_dir, jobs=1, verbose=False) -> None:
    model = cnn.load_model(os.path.join(model_dir, "arch.txt"), model_dir)
    os.makedirs(out_dir, exist_ok=True)
    ids = _scan_ids(maps_dir, ".vmask.ftnsr")
    if not ids:
        raise DataError(f"no attribute maps under {maps_dir}")

    def one(scan_id):
        maps = load_map_set(maps_dir, scan_id)
        for kind in MAP_KINDS:
            feat = cnn.extract_feature(model, attrmaps.single_channel(maps, kind))
            write_tensor(os.path.join(out_dir, f"{scan_id}.{kind}.feat.ftnsr"),
                         feat)
        _log(verbose, f"extract: {scan_id}")

    _map_jobs(one, ids, jobs)


def load_features(features_dir, rows, kinds=MAP_KINDS):
    """Per-map feature matrices for the given manifest rows, in row order."""
    features = {}
    for kind in kinds:
        mats = []
        for row in rows:
            path = os.path.join(features_dir, f"{row.scan_id}.{kind}.feat.ftnsr")
            if not os.path.exists(path):
                raise MissingFeature(f"scan {row.scan_id}, map {kind}: {path}")
            mats.append(read_tensor(path).ravel())
        features[kind] = np.stack(mats)
    return features


def run_train(features_dir, manifest_path, out_dir, C=1.0, tol=1e-4, seed=0,
              kinds=MAP_KINDS, verbose=False) -> None:
    rows = read_manifest(manifest_path)
    features = load_features(features_dir, rows, kinds=kinds)
    labels = np.array([r.expression for r in rows])
    os.makedirs(out_dir, exist_ok=True)
    for k_i, kind in enumerate(kinds):
        models = svm.train_one_vs_rest(features[kind], labels, C=C, tol=tol,
                                       seed=seed + 97 * k_i, map_kind=kind)
        svm.save_models(out_dir, models, kind)
        _log(verbose, f"train: {kind}")


def run_eval(features_dir, manifest_path, out_path, protocol="II", rounds=1,
             seed=0, subject_count=60, C=1.0, tol=1e-4, subject_pool="all",
             kinds=MAP_KINDS, verbose=False) -> evaluation.EvalReport:
    rows = evaluation.eligible_rows(read_manifest(manifest_path))
    plan = evaluation.make_folds(rows, protocol=protocol, rounds=rounds,
                                 seed=seed, subject_count=subject_count,
                                 subject_pool=subject_pool)
    features = load_features(features_dir, rows, kinds=kinds)
    labels = np.array([r.expression for r in rows])
    subjects = np.array([r.subject_id for r in rows])
    report = evaluation.evaluate(features, labels, subjects, plan, C=C,
                                 tol=tol, seed=seed)
    evaluation.write_report_csv(out_path, report)
    evaluation.write_confusion_csv(
        os.path.join(os.path.dirname(os.path.abspath(out_path)), "confusion.csv"),
        report)
    _log(verbose, f"eval: mean accuracies {report.mean_accuracy}")
    return report


def run_saliency(scan_id, expression, models_dir, net_dir, maps_dir, out_png,
                 kinds=MAP_KINDS, verbose=False) -> np.ndarray:
    model = cnn.load_model(os.path.join(net_dir, "arch.txt"), net_dir)
    maps = load_map_set(maps_dir, scan_id)
    per_kind = {}
    for kind in kinds:
        candidates = [m for m in svm.load_models(models_dir, kind)
                      if m.positive_label == expression]
        if not candidates:
            raise DataError(f"no model for map {kind}, expression {expression}")
        per_kind[kind] = candidates[0]
    sal = saliency.saliency_map(maps, per_kind, model)
    save_png_rgb(out_png, saliency.render(sal, maps.tex))
    raw_path = out_png[:-4] + ".ftnsr" if out_png.endswith(".png") \
        else out_png + ".ftnsr"
    write_tensor(raw_path, sal)
    _log(verbose, f"saliency: {scan_id}/{expression} -> {out_png}")
    return sal


def _feature_mosaic(feat):
    if feat.ndim != 3:
        raise BadTensorShape(f"feature tensor must be 3-D, got shape {feat.shape}")
    th, tw, d = feat.shape
    cols = 1
    for c in range(int(np.sqrt(d)), 0, -1):
        if d % c == 0:
            cols = c
            break
    rows = d // cols
    tiles = feat.transpose(2, 0, 1).reshape(rows, cols, th, tw)
    return tiles.swapaxes(1, 2).reshape(rows * th, cols * tw)


def run_featviz(feature_path, out_png, verbose=False) -> None:
    feat = read_tensor(feature_path)
    mosaic = _feature_mosaic(feat)
    lo, hi = mosaic.min(), mosaic.max()
    scaled = np.zeros_like(mosaic) if hi - lo < 1e-300 else (mosaic - lo) / (hi - lo)
    save_png_gray(out_png, scaled)
    binary_path = out_png[:-4] + ".bin.png" if out_png.endswith(".png") \
        else out_png + ".bin.png"
    save_png_gray(binary_path, (mosaic > 0.0).astype(np.float64))
    _log(verbose, f"featviz: {feature_path} -> {out_png} ({mosaic.shape})")


def run_netinit(arch, out_dir, seed=0, verbose=False) -> None:
    model = cnn.materialize_net(arch, out_dir, seed=seed)
    _log(verbose, f"netinit: {arch} -> {out_dir}, tap dim {model.tap_dim()}")


# --- pipeline ---

_CONFIG_KEYS = {
    "manifest": str,
    "out": str,
    "size": int,
    "crop": float,
    "net": str,
    "tap": str,
    "C": float,
    "protocol": str,
    "rounds": int,
    "seed": int,
    "subjects": int,
    "subject_pool": str,
    "maps": str,
}

_CONFIG_DEFAULTS = {
    "size": 128,
    "crop": 90.0,
    "net": "vgg_s",
    "tap": "",
    "C": 1.0,
    "protocol": "II",
    "rounds": 1,
    "seed": 0,
    "subjects": 60,
    "subject_pool": "all",
    "maps": ",".join(MAP_KINDS),
}


@dataclass
class PipelineConfig:
    manifest: str
    out: str
    size: int
    crop: float
    net: str
    tap: str
    C: float
    protocol: str
    rounds: int
    seed: int
    subjects: int
    subject_pool: str
    maps: tuple
    text: str = ""


def parse_pipeline_config(path) -> PipelineConfig:
    """Flat key=value config; unknown keys are errors."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    values = dict(_CONFIG_DEFAULTS)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _CONFIG_KEYS[key](val)
        except ValueError:
            raise ConfigError(f"config line {lineno}: bad value for {key}") from None
    for required in ("manifest", "out"):
        if required not in values:
            raise ConfigError(f"config missing required key {required!r}")
    if values["rounds"] < 1:
        raise ConfigError("rounds must be >= 1")
    kinds = tuple(k for k in values["maps"].split(",") if k)
    for k in kinds:
        if k not in MAP_KINDS:
            raise ConfigError(f"unknown map kind {k!r} in maps=")
    base = os.path.dirname(os.path.abspath(path))
    manifest = os.path.join(base, values["manifest"]) \
        if not os.path.isabs(values["manifest"]) else values["manifest"]
    if not os.path.exists(manifest):
        raise ConfigError(f"manifest not found: {manifest}")
    net = values["net"]
    if net not in cnn.BUILTIN_ARCHS:
        net = os.path.join(base, net) if not os.path.isabs(net) else net
        if not os.path.isdir(net):
            raise ConfigError(f"net directory not found: {net}")
    return PipelineConfig(manifest=manifest, out=values["out"], size=values["size"],
                          crop=values["crop"], net=net, tap=values["tap"],
                          C=values["C"], protocol=values["protocol"],
                          rounds=values["rounds"], seed=values["seed"],
                          subjects=values["subjects"],
                          subject_pool=values["subject_pool"],
                          maps=kinds, text=text)


def run_pipeline(config: PipelineConfig, jobs=1, verbose=False) -> evaluation.EvalReport:
    """Ingest, attribute maps, feature extraction and evaluation in order,
    leaving all intermediate artifacts plus report CSVs and run metadata."""
    out = config.out
    maps_dir = os.path.join(out, "maps")
    feat_dir = os.path.join(out, "features")
    os.makedirs(out, exist_ok=True)

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except FacemapError as e:
            e.args = (f"[stage {name}] {e.args[0] if e.args else ''}",)
            raise

    stage("ingest", run_ingest, config.manifest, maps_dir, size=config.size,
          crop=config.crop, jobs=jobs, verbose=verbose)
    stage("attrmaps", run_attrmaps, maps_dir, maps_dir, jobs=jobs,
          verbose=verbose)
    if config.net in cnn.BUILTIN_ARCHS:
        net_dir = os.path.join(out, "net")
        stage("netinit", run_netinit, config.net, net_dir, seed=config.seed,
              verbose=verbose)
    else:
        net_dir = config.net
    if config.tap:
        model = cnn.load_model(os.path.join(net_dir, "arch.txt"))
        if config.tap not in {s.name for s in model.layers}:
            raise ConfigError(f"tap override {config.tap!r} not in net")
        _rewrite_tap(os.path.join(net_dir, "arch.txt"), config.tap)
    stage("extract", run_extract, net_dir, maps_dir, feat_dir, jobs=jobs,
          verbose=verbose)
    report_path = os.path.join(out, "report.csv")
    report = stage("eval", run_eval, feat_dir, config.manifest, report_path,
                   protocol=config.protocol, rounds=config.rounds,
                   seed=config.seed, subject_count=config.subjects,
                   C=config.C, subject_pool=config.subject_pool,
                   kinds=config.maps, verbose=verbose)
    meta = {
        "seed": config.seed,
        "config_sha256": hashlib.sha256(config.text.encode()).hexdigest(),
        "versions": {
            "facemap": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
    }
    with open(os.path.join(out, "run.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return report


def _rewrite_tap(arch_path, tap):
    with open(arch_path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    lines = [f"tap {tap}" if line.strip().startswith("tap ") else line
             for line in lines]
    with open(arch_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


# --- argument parsing ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facemap",
        description="3D face attribute maps, deep features, SVM fusion, saliency",
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic benchmark")
    p.add_argument("--subjects", type=int, default=12)
    p.add_argument("--seed", type=int, dest="seed", default=7)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ingest", help="scans to geometry/texture maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--crop", type=float, default=90.0)

    p = sub.add_parser("attrmaps", help="normal and shape-index maps")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=attrmaps.DEFAULT_WINDOW)

    p = sub.add_parser("extract", help="deep features of attribute maps")
    p.add_argument("--model", required=True)
    p.add_argument("--maps", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="one-vs-rest SVMs on all listed scans")
    p.add_argument("--features", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--C", type=float, default=1.0)

    p = sub.add_parser("eval", help="subject-disjoint cross-validation")
    p.add_argument("--features", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--protocol", choices=("I", "II"), default="II")
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--seed", type=int, dest="seed", default=0)
    p.add_argument("--subjects", type=int, default=60)
    p.add_argument("--subject-pool", choices=("all", "fixed"), default="all")
    p.add_argument("--C", type=float, default=1.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("saliency", help="expression saliency map of one scan")
    p.add_argument("--scan", required=True)
    p.add_argument("--expression", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--net", required=True)
    p.add_argument("--maps", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("featviz", help="feature tensor mosaic PNGs")
    p.add_argument("--feature", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("netinit", help="write an arch file plus seeded weights")
    p.add_argument("--arch", required=True)
    p.add_argument("--seed", type=int, dest="seed", default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pipeline", help="full experiment from a config file")
    p.add_argument("--config", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "synth":
            run_synth(args.out, subjects=args.subjects, seed=args.seed,
                      verbose=args.verbose)
        elif args.command == "ingest":
            run_ingest(args.manifest, args.out, size=args.size, crop=args.crop,
                       jobs=args.jobs, verbose=args.verbose)
        elif args.command == "attrmaps":
            run_attrmaps(args.in_dir, args.out, window=args.window,
                         jobs=args.jobs, verbose=args.verbose)
        elif args.command == "extract":
            run_extract(args.model, args.maps, args.out, jobs=args.jobs,
                        verbose=args.verbose)
        elif args.command == "train":
            run_train(args.features, args.manifest, args.out, C=args.C,
                      seed=args.seed, verbose=args.verbose)
        elif args.command == "eval":
            run_eval(args.features, args.manifest, args.out,
                     protocol=args.protocol, rounds=args.rounds,
                     seed=args.seed, subject_count=args.subjects,
                     C=args.C, subject_pool=args.subject_pool,
                     verbose=args.verbose)
        elif args.command == "saliency":
            run_saliency(args.scan, args.expression, args.models, args.net,
                         args.maps, args.out, verbose=args.verbose)
        elif args.command == "featviz":
            run_featviz(args.feature, args.out, verbose=args.verbose)
        elif args.command == "netinit":
            run_netinit(args.arch, args.out, seed=args.seed,
                        verbose=args.verbose)
        elif args.command == "pipeline":
            config = parse_pipeline_config(args.config)
            run_pipeline(config, jobs=args.jobs, verbose=args.verbose)
    except FacemapError as e:
        print(f"facemap {args.command}: {e}", file=sys.stderr)
        return getattr(e, "exit_code", 3)
    except OSError as e:
        print(f"facemap {args.command}: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
