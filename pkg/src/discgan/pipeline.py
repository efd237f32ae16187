"""Directory-level pipeline steps behind the command-line tool.

A run directory has a fixed layout::

    config.yaml                 effective configuration
    render/index.csv            one row per rendered image
    render/<split>/clean/       clean scenes (PPM)
    render/<split>/depth/       depth maps (PFM)
    render/<split>/<water>/     rendered underwater images (PPM)
    clusters/                   model.json, labels.csv, features.csv, elbow.csv
    checkpoints/<cluster>/      latest/ and train_log.csv
    synth/<cluster>/            synthesized images (PPM)
    reports/                    report.csv and pairs.csv

Every step is a function of (config, inputs) and rewrites its outputs whole,
so repeating a step reproduces the same bytes.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import clustering, metrics, physics, scenes
from .config import RunConfig
from .formats import load_depth, load_rgb, read_csv, save_depth, save_rgb, write_csv
from .network import StyleBank
from .seeding import stream
from .training import (
    CheckpointError,
    ClusterData,
    Pair,
    TrainConfig,
    load_checkpoint,
    synthesize,
    train_cluster,
)

logger = logging.getLogger(__name__)

INDEX_HEADER = ("image", "split", "sample", "water", "path")
LABELS_HEADER = ("image", "split", "sample", "water", "cluster")


class PipelineError(RuntimeError):
    pass


@dataclass
class Rendered:
    image: str
    split: str
    sample: str
    water: str
    path: Path  # rendered image
    root: Path

    @property
    def clean_path(self) -> Path:
        return self.root / self.split / "clean" / f"{self.sample}.ppm"

    @property
    def depth_path(self) -> Path:
        return self.root / self.split / "depth" / f"{self.sample}.pfm"


def write_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump())


def select_water_types(cfg: RunConfig) -> list[physics.WaterType]:
    types = physics.load_water_types(cfg.water.table)
    if cfg.water.types is None:
        return types
    by_name = {t.name: t for t in types}
    missing = [n for n in cfg.water.types if n not in by_name]
    if missing:
        raise PipelineError(f"water types not in table: {', '.join(missing)}")
    if not cfg.water.types:
        raise PipelineError("water.types selects no water types")
    return [by_name[n] for n in cfg.water.types]


# -- render ------------------------------------------------------------------


def _samples_from_dir(in_dir: Path, cfg: RunConfig) -> tuple[list[scenes.Sample], list[scenes.Sample]]:
    """Clean ``<name>.ppm`` + ``<name>.pfm`` pairs, split deterministically like procedural scenes."""
    names = sorted(p.stem for p in in_dir.glob("*.ppm"))
    if not names:
        raise PipelineError(f"{in_dir}: no .ppm images found")
    n_train, _ = scenes.split_sizes(len(names), cfg.dataset.split)
    order = stream(cfg.seed, "dataset").permutation(len(names))
    train, val = [], []
    for rank, idx in enumerate(order):
        name = names[idx]
        depth_path = in_dir / f"{name}.pfm"
        if not depth_path.is_file():
            raise PipelineError(f"{depth_path}: missing depth map for {name}.ppm")
        img, depth = load_rgb(in_dir / f"{name}.ppm"), load_depth(depth_path)
        sample = scenes.Sample(name, 0, img, depth)
        if rank < n_train:
            train.append(sample)
            if cfg.dataset.augment:
                train.append(scenes.Sample(name + "f", 0, scenes.flip_horizontal(img),
                                           scenes.flip_horizontal(depth), flipped=True))
        else:
            val.append(sample)
    return train, val


def render(cfg: RunConfig, out: Path, in_dir: Path | None = None) -> list[Rendered]:
    """Render every clean sample under every configured water type."""
    waters = select_water_types(cfg)
    if in_dir is None:
        d = cfg.dataset
        train, val = scenes.build_dataset(d.n_scenes, d.split, cfg.seed, resolution=d.resolution,
                                          primitives=d.primitives, octaves=d.octaves, near=d.near,
                                          far=d.far, augment=d.augment)
    else:
        train, val = _samples_from_dir(Path(in_dir), cfg)
    root = out / "render"
    rows, records = [], []
    for split, samples in (("train", train), ("val", val)):
        for s in samples:
            save_rgb(_mk(root / split / "clean") / f"{s.id}.ppm", s.image)
            save_depth(_mk(root / split / "depth") / f"{s.id}.pfm", s.depth)
            for w in waters:
                path = _mk(root / split / w.name) / f"{s.id}.ppm"
                save_rgb(path, physics.render_underwater(s.image, s.depth, w))
                image = f"{s.id}.{w.name}"
                rows.append((image, split, s.id, w.name, path.relative_to(root).as_posix()))
                records.append(Rendered(image, split, s.id, w.name, path, root))
    write_csv(root / "index.csv", INDEX_HEADER, rows)
    logger.info("rendered %d images (%d train, %d val scenes)", len(rows), len(train), len(val))
    return records


def _mk(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def read_index(root: Path) -> list[Rendered]:
    index = root / "index.csv"
    if not index.is_file():
        raise PipelineError(f"{index}: render index not found; run render first")
    records = [Rendered(r["image"], r["split"], r["sample"], r["water"], root / r["path"], root)
               for r in read_csv(index)]
    if not records:
        raise PipelineError(f"{index}: render index is empty")
    return records


# -- clustering --------------------------------------------------------------


def _features_from_renders(cfg: RunConfig, records: list[Rendered]) -> np.ndarray:
    c = cfg.clustering
    feats = [clustering.extract_style_features(load_rgb(r.path), load_depth(r.depth_path), c.bins, c.max_depth)
             for r in records]
    return clustering.feature_matrix(feats, c.depth_weight)


def _features_from_csv(path: Path) -> tuple[list[str], np.ndarray]:
    rows = read_csv(path)
    if not rows:
        raise PipelineError(f"{path}: no feature rows")
    cols = [k for k in rows[0] if k != "id"]
    return [r.get("id", str(i)) for i, r in enumerate(rows)], np.array(
        [[float(r[k]) for k in cols] for r in rows], dtype=np.float64)


def load_features(cfg: RunConfig, source: Path) -> tuple[list[str], np.ndarray, list[Rendered] | None]:
    """(ids, feature matrix of the fitting set, all render records or None) for a render dir or CSV."""
    if source.is_file():
        ids, X = _features_from_csv(source)
        return ids, X, None
    records = read_index(source)
    train = [r for r in records if r.split == "train"]
    if not train:
        raise PipelineError(f"{source}: no training renders")
    return [r.image for r in train], _features_from_renders(cfg, train), records


def cluster(cfg: RunConfig, out: Path, source: Path) -> clustering.ClusterModel:
    c = cfg.clustering
    ids, X, records = load_features(cfg, source)
    model = clustering.kmeans_fit(X, c.k, cfg.seed, c.max_iter, c.restarts)
    cdir = _mk(out / "clusters")
    model.save(cdir / "model.json", depth_weight=c.depth_weight, bins=c.bins, max_depth=c.max_depth)
    clustering.write_features_csv(cdir / "features.csv", ids, X)
    if records is None:
        rows = [(i, "input", "", "", int(l)) for i, l in zip(ids, model.labels)]
    else:
        train_labels = dict(zip(ids, model.labels.tolist()))
        val = [r for r in records if r.split == "val"]
        val_labels = {}
        if val:
            Xv = _features_from_renders(cfg, val)
            val_labels = {r.image: clustering.assign_cluster(model, x) for r, x in zip(val, Xv)}
        rows = [(r.image, r.split, r.sample, r.water, train_labels.get(r.image, val_labels.get(r.image)))
                for r in records]
    write_csv(cdir / "labels.csv", LABELS_HEADER, rows)
    logger.info("k=%d inertia %.6g", c.k, model.inertia)
    return model


def elbow(cfg: RunConfig, out: Path, source: Path) -> tuple[list[tuple[int, float]], int]:
    c = cfg.clustering
    _, X, _ = load_features(cfg, source)
    k_max = min(c.k_max, len(np.unique(X, axis=0)))
    if k_max - c.k_min < 2:
        raise PipelineError(f"too few distinct feature vectors for an elbow scan from k={c.k_min}")
    curve = clustering.elbow_scan(X, range(c.k_min, k_max + 1), cfg.seed, c.max_iter, c.restarts)
    k = clustering.suggest_k(curve)
    write_csv(_mk(out / "clusters") / "elbow.csv", ("k", "inertia"), curve)
    return curve, k


def read_labels(out: Path) -> list[dict[str, str]]:
    path = out / "clusters" / "labels.csv"
    if not path.is_file():
        raise PipelineError(f"{path}: cluster labels not found; run cluster first")
    return read_csv(path)


# -- training and synthesis --------------------------------------------------


def cluster_records(out: Path, cluster_id: int) -> tuple[list[Rendered], list[Rendered]]:
    """(train, val) render records labeled ``cluster_id``."""
    records = {r.image: r for r in read_index(out / "render")}
    train, val = [], []
    for row in read_labels(out):
        if row["cluster"] != "" and int(row["cluster"]) == cluster_id and row["image"] in records:
            (train if row["split"] == "train" else val).append(records[row["image"]])
    return train, val


def cluster_ids(out: Path) -> list[int]:
    return sorted({int(r["cluster"]) for r in read_labels(out) if r["cluster"] != ""})


def _pairs(records: list[Rendered]) -> list[Pair]:
    return [Pair(r.image, load_rgb(r.clean_path), load_rgb(r.path)) for r in records]


def train(cfg: RunConfig, out: Path, cluster_id: int) -> list[dict]:
    train_recs, val_recs = cluster_records(out, cluster_id)
    if len(train_recs) < 2:
        raise PipelineError(f"cluster {cluster_id} has {len(train_recs)} training images; need >= 2")
    data = ClusterData(_pairs(train_recs), _pairs(val_recs))
    t = cfg.train
    tc = TrainConfig(t.lr, t.beta1, t.beta2, t.epochs, t.batch_size, t.lambda_rec, t.lambda_adv,
                     cfg.seed, data.train[0].content.shape[0], cluster_id)
    _, log = train_cluster(cluster_id, data, tc, out / "checkpoints" / str(cluster_id), StyleBank(cfg.seed))
    return log


def _checkpoint(out: Path, cluster_id: int):
    path = out / "checkpoints" / str(cluster_id) / "latest"
    if not (path / "manifest.json").is_file():
        raise CheckpointError(f"no checkpoint for cluster {cluster_id} at {path}; run train first")
    gen, _, manifest = load_checkpoint(path)
    return gen, manifest


def synthesize_files(cfg: RunConfig, out: Path, cluster_id: int, contents: list[Path] | None = None) -> list[Path]:
    """Restyle clean images into ``synth/<cluster>/``.

    Without ``contents`` the validation scenes that have a render labeled
    ``cluster_id`` are used, and each output is named after its scene.
    """
    gen, manifest = _checkpoint(out, cluster_id)
    train_recs, val_recs = cluster_records(out, cluster_id)
    if not train_recs:
        raise PipelineError(f"cluster {cluster_id} has no training images to draw styles from")
    pool = [load_rgb(r.path) for r in train_recs]
    bank = StyleBank(manifest["bank_seed"])
    if contents is None:
        sources = {}
        for r in val_recs:
            sources.setdefault(r.sample, r.clean_path)
        items = sorted(sources.items())
    else:
        items = [(Path(p).stem, Path(p)) for p in contents]
    if not items:
        raise PipelineError(f"cluster {cluster_id}: nothing to synthesize")
    sdir = _mk(out / "synth" / str(cluster_id))
    written = []
    for name, path in items:
        if not Path(path).is_file():
            raise PipelineError(f"{path}: content image not found")
        img = synthesize(load_rgb(path), cluster_id, pool, gen, cfg.seed, bank)
        save_rgb(sdir / f"{name}.ppm", img)
        written.append(sdir / f"{name}.ppm")
    return written


# -- evaluation --------------------------------------------------------------


def _fid(cfg: RunConfig, gen: list, ref: list, bank: StyleBank) -> float:
    if len(gen) < 2 or len(ref) < 2:
        return math.nan
    return metrics.fid(metrics.embed_images(ref, cfg.eval.embedder, bank),
                       metrics.embed_images(gen, cfg.eval.embedder, bank), cfg.eval.fid_method)


def evaluate_dirs(cfg: RunConfig, out: Path, gen_dir: Path, ref_dir: Path) -> list[metrics.ClusterReport]:
    """Pair ``<name>.ppm`` files of two directories by name and report one "all" row."""
    gen_files = sorted(Path(gen_dir).glob("*.ppm"))
    if not gen_files:
        raise PipelineError(f"{gen_dir}: no generated .ppm images")
    missing = [p.name for p in gen_files if not (Path(ref_dir) / p.name).is_file()]
    if missing:
        raise PipelineError(f"{ref_dir}: no reference for {', '.join(missing)}")
    gen = [load_rgb(p) for p in gen_files]
    ref = [load_rgb(Path(ref_dir) / p.name) for p in gen_files]
    bank = StyleBank(cfg.seed)
    report = metrics.evaluate_cluster(gen, ref, "all", cfg.eval.embedder, bank, fid_method=cfg.eval.fid_method)
    _write_reports(out, [report], {"all": [p.stem for p in gen_files]}, None)
    return [report]


def evaluate_run(cfg: RunConfig, out: Path) -> tuple[list[metrics.ClusterReport], float]:
    """Per-cluster SSIM/PSNR/FID of ``synth/<c>/`` against the validation renders of cluster c."""
    sroot = out / "synth"
    clusters = sorted(int(p.name) for p in sroot.glob("*") if p.is_dir() and p.name.isdigit()) if sroot.is_dir() else []
    if not clusters:
        raise PipelineError(f"{sroot}: no synthesized clusters; run synthesize first")
    bank = StyleBank(cfg.seed)
    reports, names = [], {}
    all_gen, all_ref = [], []
    for c in clusters:
        _, val_recs = cluster_records(out, c)
        by_sample = defaultdict(list)
        for r in val_recs:
            by_sample[r.sample].append(r)
        files = sorted((sroot / str(c)).glob("*.ppm"))
        files = [p for p in files if p.stem in by_sample]
        if not files:
            logger.warning("cluster %d: no synthesized image matches a validation scene", c)
            continue
        gen = [load_rgb(p) for p in files]
        paired = [load_rgb(sorted(by_sample[p.stem], key=lambda r: r.water)[0].path) for p in files]
        ref = [load_rgb(r.path) for r in sorted(val_recs, key=lambda r: r.image)]
        report = metrics.evaluate_cluster(gen, paired, str(c), cfg.eval.embedder, bank, gen, ref,
                                          cfg.eval.fid_method)
        reports.append(report)
        names[str(c)] = [p.stem for p in files]
        all_gen += gen
        all_ref += ref
    if not reports:
        raise PipelineError("no synthesized image could be paired with a validation render")
    overall = _fid(cfg, all_gen, all_ref, bank)
    _write_reports(out, reports, names, overall)
    return reports, overall


def _write_reports(out: Path, reports, names, overall) -> None:
    rdir = _mk(out / "reports")
    metrics.write_report(rdir / "report.csv", reports, overall)
    metrics.write_pair_report(rdir / "pairs.csv", reports, names)
