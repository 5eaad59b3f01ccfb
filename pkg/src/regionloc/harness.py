"""Experiment orchestration: config, scene generation, tree building,
pre-training, training, localization and evaluation.

Every stage reads and writes files inside one output directory::

    manifest.json            scene manifest (seed, primitives, camera)
    depth/train_0000.srd     depth rasters
    train_poses.txt          trajectories (tx ty tz qx qy qz qw)
    query_poses.txt
    tree.srct                partition tree with leaf centers
    pretrain.srcc(.json)     meta-learned initialization
    model.srcc(.json)        trained classifier
    train_curve.csv          iteration, loss, per-level batch accuracy
    estimates.txt            localized query poses
    report.json              evaluation report
    resolved_config.ini      config actually used by the last stage
"""

from __future__ import annotations

import configparser
import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import classifier as clf
from .descriptors import make_provider
from .geometry import (
    PinholeCamera,
    Se3Pose,
    fuse_point_cloud,
    load_depth,
    load_trajectory,
    pose_error,
    save_depth,
    save_trajectory,
)
from .partition import build_tree, cluster_leaves, label_view, load_tree, save_tree
from .pose import CorrespondenceSet, NoPoseError, RansacConfig, estimate_pose
from .synth import generate_scene, render_depth, sample_views, save_manifest

log = logging.getLogger("regionloc")

CONFIG_VERSION = 1
ENV_PREFIX = "REGIONLOC_"


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


@dataclass
class SceneSection:
    seed: int = 0
    n_points: int = 20000
    diameter: float = 4.0
    train_views: int = 20
    query_views: int = 10
    view_seed: int = 1
    query_seed: int = 2
    width: int = 160
    height: int = 120
    focal: float = 120.0
    fuse_stride: int = 2
    label_stride: int = 2
    query_stride: int = 2


@dataclass
class TreeSection:
    m: int = 8
    n: int = 2
    q: int = 10
    seed: int = 0


@dataclass
class DescriptorSection:
    provider: str = "oracle"
    dim: int = 32
    noise: float = 0.05
    frequency: float = 2.0
    embedding_seed: int = 0
    cross_scene_shift: float = 0.0


@dataclass
class ClassifierSection:
    hidden: int = 64
    hyper_hidden: int = 0  # 0 means "same as descriptor dim"
    iterations: int = 2000
    learning_rate: float = 2e-3
    seed: int = 0
    init: str = "random"  # or a checkpoint path


@dataclass
class RansacSection:
    hypotheses: int = 256
    tau: float = 10.0
    max_refine_iters: int = 20
    seed: int = 0


@dataclass
class MetaSection:
    enabled: bool = False
    tasks: int = 3
    task_seed: int = 100
    inner_steps: int = 2
    inner_lr: float = 0.05
    outer_step: float = 0.5
    iterations: int = 500
    seed: int = 0


@dataclass
class LocalizeSection:
    mode: str = "classifier"  # or "oracle-labels"
    thresholds: str = "0.05:5,0.1:10"  # translation (scene units):rotation (deg) pairs
    workers: int = 1  # queries localized by a process pool when > 1


@dataclass
class ExperimentConfig:
    """Desk-scale defaults. ``full_scale()`` returns the benchmark-scale hyperparameters."""

    version: int = CONFIG_VERSION
    scene: SceneSection = field(default_factory=SceneSection)
    tree: TreeSection = field(default_factory=TreeSection)
    descriptors: DescriptorSection = field(default_factory=DescriptorSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    ransac: RansacSection = field(default_factory=RansacSection)
    meta: MetaSection = field(default_factory=MetaSection)
    localize: LocalizeSection = field(default_factory=LocalizeSection)

    @classmethod
    def full_scale(cls) -> "ExperimentConfig":
        cfg = cls()
        cfg.tree.m = 64
        cfg.tree.q = 10
        cfg.descriptors.dim = 256
        cfg.classifier.learning_rate = 5e-4
        cfg.ransac.hypotheses = 256
        cfg.ransac.tau = 10.0
        cfg.meta.tasks = 12
        cfg.meta.inner_steps = 2
        cfg.meta.inner_lr = 5e-4
        cfg.meta.outer_step = 5e-4
        return cfg

    @property
    def camera(self) -> PinholeCamera:
        s = self.scene
        return PinholeCamera(s.focal, s.focal, s.width / 2, s.height / 2, s.width, s.height)

    @property
    def ransac_config(self) -> RansacConfig:
        r = self.ransac
        return RansacConfig(r.hypotheses, r.tau, r.max_refine_iters, r.seed)

    @property
    def thresholds(self) -> List[Tuple[float, float]]:
        out = []
        for item in self.localize.thresholds.split(","):
            t, r = item.split(":")
            out.append((float(t), float(r)))
        return out

    def validate(self) -> "ExperimentConfig":
        checks = [
            (self.version == CONFIG_VERSION, f"unsupported config version {self.version}"),
            (self.tree.m >= 2, "tree.m must be >= 2"),
            (self.tree.n >= 1, "tree.n must be >= 1"),
            (self.tree.q >= 1, "tree.q must be >= 1"),
            (self.ransac.hypotheses >= 1, "ransac.hypotheses must be >= 1"),
            (self.ransac.tau > 0, "ransac.tau must be > 0"),
            (self.descriptors.dim >= 1, "descriptors.dim must be >= 1"),
            (self.descriptors.noise >= 0, "descriptors.noise must be >= 0"),
            (self.scene.n_points >= 1, "scene.n_points must be >= 1"),
            (self.scene.train_views >= 1, "scene.train_views must be >= 1"),
            (self.scene.query_views >= 0, "scene.query_views must be >= 0"),
            (self.meta.inner_steps >= 1, "meta.inner_steps must be >= 1"),
            (self.meta.outer_step >= 0, "meta.outer_step must be >= 0"),
            (self.localize.workers >= 1, "localize.workers must be >= 1"),
            (self.localize.mode in ("classifier", "oracle-labels"), "localize.mode must be classifier or oracle-labels"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        init = self.classifier.init
        if init != "random" and not Path(init).exists():
            raise ConfigError(f"classifier.init checkpoint {init} does not exist")
        prov = self.descriptors.provider
        if prov.startswith("file:") and not Path(prov[5:]).is_dir():
            raise ConfigError(f"descriptor directory {prov[5:]} does not exist")
        if prov != "oracle" and not prov.startswith("file:"):
            raise ConfigError(f"unknown descriptor provider {prov!r}")
        try:
            self.thresholds
        except ValueError as exc:
            raise ConfigError(f"bad localize.thresholds: {exc}") from exc
        return self

    # ---- text form ----

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["experiment"] = {"version": str(self.version)}
        for f in fields(self):
            if f.name == "version":
                continue
            cp[f.name] = {k: str(v) for k, v in asdict(getattr(self, f.name)).items()}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in cp[sec].items()]
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str, env: Optional[Dict[str, str]] = None) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls()
        if cp.has_section("experiment"):
            cfg.version = int(cp["experiment"].get("version", CONFIG_VERSION))
        for f in fields(cfg):
            if f.name == "version":
                continue
            section = getattr(cfg, f.name)
            if cp.has_section(f.name):
                for key, raw in cp[f.name].items():
                    _set_field(section, f.name, key, raw)
        for name, raw in (env if env is not None else os.environ).items():
            if not name.startswith(ENV_PREFIX):
                continue
            rest = name[len(ENV_PREFIX) :].lower()
            sec, _, key = rest.partition("__")
            if not key or not hasattr(cfg, sec) or sec == "version":
                continue
            _set_field(getattr(cfg, sec), sec, key, raw)
        return cfg


def _set_field(section, sec_name: str, key: str, raw: str) -> None:
    types = {f.name: f.type for f in fields(section)}
    if key not in types:
        raise ConfigError(f"unknown key {sec_name}.{key}")
    current = getattr(section, key)
    try:
        if isinstance(current, bool):
            val = raw.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(current, int):
            val = int(raw)
        elif isinstance(current, float):
            val = float(raw)
        else:
            val = raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{sec_name}.{key}: cannot parse {raw!r}") from exc
    setattr(section, key, val)


def load_config(path=None, env=None) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig.from_ini("", env)
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        cfg = ExperimentConfig.from_ini(p.read_text(), env)
    return cfg.validate()


def write_resolved(cfg: ExperimentConfig, out: Path) -> None:
    (out / "resolved_config.ini").write_text(cfg.to_ini())


# ---- data access --------------------------------------------------------

def _ensure_dir(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write to output directory {out}: {exc}") from exc
    return out


def depth_path(out: Path, role: str, i: int) -> Path:
    return Path(out) / "depth" / f"{role}_{i:04d}.srd"


def load_views(out, role: str) -> List[Tuple[np.ndarray, Se3Pose]]:
    out = Path(out)
    traj = out / f"{role}_poses.txt"
    if not traj.exists():
        raise DataError(f"missing trajectory {traj}; run gen-scene first")
    poses = load_trajectory(traj)
    views = []
    for i, pose in enumerate(poses):
        path = depth_path(out, role, i)
        if not path.exists():
            raise DataError(f"missing depth raster {path}")
        views.append((load_depth(path), pose))
    return views


def make_descriptor_provider(cfg: ExperimentConfig, scene_seed: Optional[int] = None):
    d = cfg.descriptors
    return make_provider(
        d.provider,
        scene_seed=d.embedding_seed,
        dim=d.dim,
        noise_sigma=d.noise,
        frequency=d.frequency,
        cross_scene_shift=d.cross_scene_shift,
        shift_seed=cfg.scene.seed if scene_seed is None else scene_seed,
    )


def labeled_dataset(tree, views, provider, camera, stride: int, stream_base: int = 0):
    """List of (descriptors, levels) per view, skipping empty views."""
    data = []
    for i, (depth, pose) in enumerate(views):
        labels = label_view(tree, depth, pose, camera, stride)
        dm = provider.describe_view(depth, pose, camera, stride, stream_base + i)
        if len(dm) != len(labels) or not np.array_equal(dm.pixels, labels.pixels):
            raise DataError(f"view {i}: descriptor pixels do not match labeled pixels")
        if len(labels):
            data.append((dm.descriptors, labels.levels))
    return data


# ---- stages -------------------------------------------------------------

def synth_views(cfg: ExperimentConfig, scene_seed: Optional[int] = None):
    """In-memory scene, train views and query views for a config."""
    s = cfg.scene
    seed = s.seed if scene_seed is None else scene_seed
    scene = generate_scene(seed, s.n_points, s.diameter)
    cam = cfg.camera
    train = sample_views(scene, s.train_views, s.view_seed + 7919 * seed, cam, "train")
    train_views = [(render_depth(scene, p, cam), p) for p in train.poses]
    query_views = []
    if s.query_views:
        query = sample_views(scene, s.query_views, s.query_seed + 7919 * seed, cam, "query")
        query_views = [(render_depth(scene, p, cam), p) for p in query.poses]
    return scene, train_views, query_views


def gen_scene(cfg: ExperimentConfig, out) -> Path:
    out = _ensure_dir(out)
    scene, train_views, query_views = synth_views(cfg)
    (out / "depth").mkdir(exist_ok=True)
    for role, views in (("train", train_views), ("query", query_views)):
        for i, (depth, _) in enumerate(views):
            save_depth(depth_path(out, role, i), depth)
        save_trajectory(out / f"{role}_poses.txt", [p for _, p in views])
    cam = cfg.camera
    save_manifest(
        out / "manifest.json",
        scene,
        {"camera": asdict(cam), "train_views": len(train_views), "query_views": len(query_views)},
    )
    write_resolved(cfg, out)
    log.info("wrote scene %d with %d train / %d query views to %s", scene.seed, len(train_views), len(query_views), out)
    return out


def make_tree(cfg: ExperimentConfig, views, camera):
    cloud = fuse_point_cloud(views, camera, cfg.scene.fuse_stride)
    tree = build_tree(cloud, cfg.tree.m, cfg.tree.n, cfg.tree.seed)
    return cluster_leaves(tree, cfg.tree.q, cfg.tree.seed)


def build_tree_stage(cfg: ExperimentConfig, out):
    out = _ensure_dir(out)
    views = load_views(out, "train")
    tree = make_tree(cfg, views, cfg.camera)
    save_tree(out / "tree.srct", tree)
    write_resolved(cfg, out)
    log.info("tree: %d leaves (max %d), mean leaf radius %.4f", tree.n_leaves, cfg.tree.m**cfg.tree.n, tree.mean_leaf_radius())
    return tree


def meta_tasks(cfg: ExperimentConfig, count: Optional[int] = None, first_seed: Optional[int] = None):
    """Labeled training sets of independent synthetic scenes."""
    count = cfg.meta.tasks if count is None else count
    first = cfg.meta.task_seed if first_seed is None else first_seed
    tasks = []
    for k in range(count):
        seed = first + k
        _, views, _ = synth_views(replace(cfg, scene=replace(cfg.scene, seed=seed, query_views=0)))
        tree = make_tree(cfg, views, cfg.camera)
        provider = make_descriptor_provider(cfg, scene_seed=seed)
        tasks.append(labeled_dataset(tree, views, provider, cfg.camera, cfg.scene.label_stride))
    return tasks


def _init_params(cfg: ExperimentConfig) -> clf.ClassifierParams:
    c = cfg.classifier
    return clf.init_params(
        cfg.descriptors.dim, cfg.tree.m, cfg.tree.n, c.hidden, c.hyper_hidden or None, seed=c.seed
    )


def pretrain_stage(cfg: ExperimentConfig, out):
    out = _ensure_dir(out)
    if cfg.meta.tasks < 2:
        raise ConfigError("pre-training needs at least 2 tasks")
    tasks = meta_tasks(cfg)
    init = _init_params(cfg)
    mc = clf.MetaConfig(cfg.meta.inner_steps, cfg.meta.inner_lr, cfg.meta.outer_step, cfg.meta.iterations)
    params = clf.reptile_pretrain(init, tasks, mc, cfg.meta.seed)
    clf.save_checkpoint(
        out / "pretrain.srcc",
        params,
        {"stage": "pretrain", "meta": asdict(cfg.meta), "classifier_seed": cfg.classifier.seed},
    )
    write_resolved(cfg, out)
    return params


def train_stage(cfg: ExperimentConfig, out):
    out = _ensure_dir(out)
    tree_path = out / "tree.srct"
    if not tree_path.exists():
        raise DataError(f"missing {tree_path}; run build-tree first")
    tree = load_tree(tree_path)
    views = load_views(out, "train")
    provider = make_descriptor_provider(cfg)
    data = labeled_dataset(tree, views, provider, cfg.camera, cfg.scene.label_stride)
    if cfg.classifier.init == "random":
        params = _init_params(cfg)
    else:
        params = clf.load_checkpoint(cfg.classifier.init)
    if params.dim != cfg.descriptors.dim or params.m != tree.m or params.n != tree.n:
        raise ConfigError("initial checkpoint shape does not match descriptors/tree")
    tc = clf.TrainConfig(cfg.classifier.iterations, cfg.classifier.learning_rate, seed=cfg.classifier.seed)
    rows = []

    def record(it, loss, p, view):
        desc, levels = data[view]
        pred, _ = clf.predict(p, desc)
        rows.append([it, loss, *np.mean(pred == levels, axis=0).tolist()])

    result = clf.train_fast(params, data, tc, callback=record)
    final_acc = clf.accuracy(result.params, data)
    with open(out / "train_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"] + [f"acc_level{l + 1}" for l in range(tree.n)])
        w.writerows(rows)
    clf.save_checkpoint(
        out / "model.srcc",
        result.params,
        {"stage": "train", "init": cfg.classifier.init, "train": asdict(tc), "final_accuracy": final_acc},
    )
    write_resolved(cfg, out)
    log.info("trained %d iterations, region accuracy %.4f", len(result.losses), final_acc)
    return result, final_acc


def build_correspondences(tree, pixels, levels, camera) -> Tuple[CorrespondenceSet, np.ndarray]:
    """Expand each pixel to the leaf centers of its label. Returns (set, kept pixel indices)."""
    from .partition import composite_ids

    comps = composite_ids(levels, tree.m)
    keep, cands = [], []
    for i, c in enumerate(comps):
        leaf = tree.leaf_index(c)
        if leaf is None:
            continue
        keep.append(i)
        cands.append(tree.leaf_centers[leaf])
    keep = np.asarray(keep, dtype=np.int64)
    if not len(keep):
        return None, keep
    return CorrespondenceSet.from_lists(np.asarray(pixels)[keep], cands, camera), keep


def query_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1, dtype=np.uint32)[0])


@dataclass
class QueryResult:
    index: int
    pose: Optional[Se3Pose]
    translation_error: float
    rotation_error: float
    score: float
    inliers: int
    time_ms: float
    ok: bool


def _localize_one(cfg: ExperimentConfig, tree, params, view, qi: int, mode: str, stream_base: int) -> QueryResult:
    depth, truth = view
    cam = cfg.camera
    rcfg = cfg.ransac_config
    t0 = time.perf_counter()
    labels = label_view(tree, depth, truth, cam, cfg.scene.query_stride)
    if mode == "oracle-labels":
        levels = labels.levels
    else:
        provider = make_descriptor_provider(cfg)
        dm = provider.describe_view(depth, truth, cam, cfg.scene.query_stride, stream_base + qi)
        levels, _ = clf.predict(params, dm.descriptors)
    pose, score, inl, ok = None, float("nan"), 0, False
    corr, _ = build_correspondences(tree, labels.pixels, levels, cam)
    if corr is not None and len(corr) >= 4:
        try:
            res = estimate_pose(corr, replace(rcfg, seed=query_seed(rcfg.seed, qi)))
            pose, score, inl, ok = res.pose, res.score, res.inliers, True
        except NoPoseError:
            pass
    ms = (time.perf_counter() - t0) * 1000
    te, re = pose_error(pose, truth) if ok else (float("inf"), float("inf"))
    return QueryResult(qi, pose, te, re, score, inl, ms, ok)


def localize_views(cfg: ExperimentConfig, tree, params, views, mode: Optional[str] = None, stream_base: int = 10**6):
    """Localize each (depth, pose) view; the pose is used only for evaluation and oracle labels.

    Each query gets its own RANSAC seed, so results do not depend on the
    number of workers. Output is always in query order.
    """
    mode = cfg.localize.mode if mode is None else mode
    args = [(cfg, tree, params, view, qi, mode, stream_base) for qi, view in enumerate(views)]
    workers = min(cfg.localize.workers, len(args))
    if workers <= 1:
        return [_localize_one(*a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_localize_one, *zip(*args)))


@dataclass
class EvalReport:
    rows: List[dict]
    median_translation: float
    median_rotation: float
    success_rates: Dict[str, float]
    failures: int = 0

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not np.isfinite(v):
                return None
            return v

        doc = asdict(self)
        doc["rows"] = [{k: clean(v) for k, v in r.items()} for r in doc["rows"]]
        doc["median_translation"] = clean(doc["median_translation"])
        doc["median_rotation"] = clean(doc["median_rotation"])
        return json.dumps(doc, indent=2, sort_keys=True)


def make_report(rows: List[dict], thresholds: Sequence[Tuple[float, float]]) -> EvalReport:
    """Failed queries count as infinite error."""
    te = np.array([r["translation_error"] for r in rows], dtype=np.float64)
    re = np.array([r["rotation_error"] for r in rows], dtype=np.float64)
    if len(rows) == 0:
        return EvalReport([], float("nan"), float("nan"), {f"{t}:{r}": 0.0 for t, r in thresholds}, 0)
    rates = {f"{t}:{r}": float(np.mean((te <= t) & (re <= r))) for t, r in thresholds}
    return EvalReport(
        rows, float(np.median(te)), float(np.median(re)), rates, int(sum(not np.isfinite(x) for x in te))
    )


def evaluate(estimates: Sequence[Optional[Se3Pose]], truths: Sequence[Se3Pose], thresholds=((0.05, 5.0),)) -> EvalReport:
    if len(estimates) != len(truths):
        raise DataError(f"{len(estimates)} estimates vs {len(truths)} ground-truth poses")
    rows = []
    for i, (est, gt) in enumerate(zip(estimates, truths)):
        te, re = pose_error(est, gt) if est is not None else (float("inf"), float("inf"))
        rows.append({"index": i, "translation_error": te, "rotation_error": re})
    return make_report(rows, thresholds)


def localize_stage(cfg: ExperimentConfig, out, mode: Optional[str] = None) -> EvalReport:
    out = _ensure_dir(out)
    tree_path = out / "tree.srct"
    if not tree_path.exists():
        raise DataError(f"missing {tree_path}; run build-tree first")
    tree = load_tree(tree_path)
    if tree.leaf_centers is None:
        raise DataError("tree has no leaf centers")
    mode = cfg.localize.mode if mode is None else mode
    params = None
    if mode == "classifier":
        ckpt = out / "model.srcc"
        if not ckpt.exists():
            raise DataError(f"missing {ckpt}; run train first")
        params = clf.load_checkpoint(ckpt)
    traj = out / "query_poses.txt"
    views = load_views(out, "query") if traj.exists() and traj.read_text().strip() else []
    results = localize_views(cfg, tree, params, views, mode)
    rows = [
        {
            "index": r.index,
            "translation_error": r.translation_error,
            "rotation_error": r.rotation_error,
            "score": r.score,
            "inliers": r.inliers,
            "time_ms": r.time_ms,
            "ok": r.ok,
        }
        for r in results
    ]
    report = make_report(rows, cfg.thresholds)
    lines = []
    for r in results:
        if r.pose is None:
            lines.append("nan nan nan nan nan nan nan")
        else:
            lines.append(" ".join(repr(float(v)) for v in [*r.pose.translation, *r.pose.quat]))
    (out / "estimates.txt").write_text("".join(line + "\n" for line in lines))
    (out / "report.json").write_text(report.to_json())
    write_resolved(cfg, out)
    return report


def load_estimates(path) -> List[Optional[Se3Pose]]:
    out = []
    for line in Path(path).read_text().splitlines():
        vals = line.split()
        if not vals:
            continue
        if any(v.lower() == "nan" for v in vals):
            out.append(None)
            continue
        v = [float(x) for x in vals]
        out.append(Se3Pose(np.array(v[3:]), np.array(v[:3])))
    return out


def eval_stage(cfg: ExperimentConfig, out, estimates_path=None) -> EvalReport:
    """Score ``estimates.txt`` against the query trajectory and write ``report.json``."""
    out = Path(out)
    est_path = Path(estimates_path) if estimates_path else out / "estimates.txt"
    traj = out / "query_poses.txt"
    for p in (est_path, traj):
        if not p.exists():
            raise DataError(f"missing {p}")
    truths = load_trajectory(traj)
    report = evaluate(load_estimates(est_path), truths, cfg.thresholds)
    (out / "report.json").write_text(report.to_json())
    write_resolved(cfg, out)
    return report
