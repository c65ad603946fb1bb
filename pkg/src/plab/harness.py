"""Task-incremental experiment engine.

Builds disjoint-class task streams, trains one model through them with the
selected optimizer (plus optional unit replacement and per-task-reinit
upper-bound protocols), logs the metric suite per task, and aggregates
runs over seeds. Every run is a pure function of (config, seed): shuffling,
initialization, stream rendering, and probe draws all derive from fixed
seed paths, so outputs are byte-reproducible.
"""
from __future__ import annotations

import csv
import io
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import metrics as mx
from .arrow import ArrowConfig, ArrowOptimizer, SgdOptimizer
from .cbp import CbpConfig, UnitLedger, cbp_step
from .errors import ConfigError
from .metrics import FEATURE_COMPONENTS, PlasticityReport
from .model import (ActivationProbe, MiniViT, MiniViTConfig, _ModelBase, build, build_mlp,
                    matched_mlp_config, probe_activations, save_model)
from .seeding import derive_rng

# seed-path tags keeping the independent RNG streams apart
_TAG_PARTITION, _TAG_PATTERN, _TAG_SAMPLES, _TAG_PROBE, _TAG_TRAIN = 11, 12, 13, 14, 15

GENERATORS = ("synthetic_clusters", "label_permutation")


@dataclass(frozen=True)
class StreamConfig:
    generator: str = "synthetic_clusters"
    classes: int = 40
    tasks: int = 20
    classes_per_task: int = 2
    train_per_class: int = 200
    eval_per_class: int = 100
    image_side: int = 16
    noise: float = 0.2
    amplitude: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"generator must be one of {GENERATORS}, got {self.generator!r}")
        if self.classes < self.tasks * self.classes_per_task:
            raise ConfigError(
                f"{self.classes} classes cannot cover {self.tasks} tasks "
                f"x {self.classes_per_task} classes per task")
        for name in ("tasks", "classes_per_task", "train_per_class", "eval_per_class", "image_side"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class Task:
    index: int
    class_ids: tuple[int, ...]
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray


@dataclass
class TaskStream:
    config: StreamConfig
    tasks: list[Task]

    def probe_batch(self, task_index: int, size: int) -> np.ndarray:
        """Fixed held-out probe images for one task, drawn from its class mixture."""
        cfg = self.config
        rng = derive_rng(cfg.seed, _TAG_PROBE, task_index)
        ids = self.tasks[task_index].class_ids
        per = [size // len(ids)] * len(ids)
        for i in range(size - sum(per)):
            per[i] += 1
        chunks = [_render_class(cfg, cid, n, rng) for cid, n in zip(ids, per)]
        return np.concatenate(chunks, axis=0)


def _class_pattern(cfg: StreamConfig, class_id: int) -> np.ndarray:
    """Class texture: one 2-D sinusoid with class-specific frequency and phase."""
    rng = derive_rng(cfg.seed, _TAG_PATTERN, class_id)
    fx, fy = rng.uniform(0.5, 3.0, size=2)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    s = cfg.image_side
    ii, jj = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    return cfg.amplitude * np.sin(2.0 * np.pi * (fx * ii + fy * jj) / s + phase)


def _render_class(cfg: StreamConfig, class_id: int, n: int, rng: np.random.Generator) -> np.ndarray:
    base = _class_pattern(cfg, class_id)
    return base[None, :, :] + cfg.noise * rng.normal(size=(n, cfg.image_side, cfg.image_side))


def _task_class_ids(cfg: StreamConfig) -> list[tuple[int, ...]]:
    cpt = cfg.classes_per_task
    if cfg.generator == "label_permutation":
        # Disjoint ids per task, but each id borrows its texture from a fixed
        # pool of cpt patterns whose assignment is permuted per task.
        return [tuple(range(t * cpt, (t + 1) * cpt)) for t in range(cfg.tasks)]
    perm = derive_rng(cfg.seed, _TAG_PARTITION).permutation(cfg.classes)
    return [tuple(int(c) for c in perm[t * cpt:(t + 1) * cpt]) for t in range(cfg.tasks)]


def _pattern_id(cfg: StreamConfig, task_index: int, class_id: int) -> int:
    """Texture id backing a class id (identity except for label permutation)."""
    if cfg.generator != "label_permutation":
        return class_id
    cpt = cfg.classes_per_task
    local = class_id % cpt
    perm = derive_rng(cfg.seed, _TAG_PARTITION, task_index).permutation(cpt)
    return int(perm[local])


def make_stream(cfg: StreamConfig) -> TaskStream:
    """Deterministic task stream with pairwise-disjoint class-id sets."""
    tasks = []
    for t, ids in enumerate(_task_class_ids(cfg)):
        xs_train, ys_train, xs_eval, ys_eval = [], [], [], []
        for local, cid in enumerate(ids):
            pid = _pattern_id(cfg, t, cid)
            rng = derive_rng(cfg.seed, _TAG_SAMPLES, t, cid)
            xs_train.append(_render_class(cfg, pid, cfg.train_per_class, rng))
            ys_train.append(np.full(cfg.train_per_class, local, dtype=np.int64))
            xs_eval.append(_render_class(cfg, pid, cfg.eval_per_class, rng))
            ys_eval.append(np.full(cfg.eval_per_class, local, dtype=np.int64))
        tasks.append(Task(
            index=t,
            class_ids=ids,
            train_x=np.concatenate(xs_train),
            train_y=np.concatenate(ys_train),
            eval_x=np.concatenate(xs_eval),
            eval_y=np.concatenate(ys_eval),
        ))
    return TaskStream(cfg, tasks)


@dataclass(frozen=True)
class ExperimentConfig:
    arch: str = "mini_vit"
    model: MiniViTConfig = field(default_factory=MiniViTConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    optimizer: str = "sgd"
    eta: float = 1e-3
    arrow: ArrowConfig | None = None
    cbp: CbpConfig | None = None
    epochs_per_task: int = 10
    batch_size: int = 32
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    metric_cadence: int = 1
    frozen_blocks: tuple[int, ...] = ()
    upper_bound: bool = False
    probe_batch: int = 256

    def __post_init__(self):
        if self.arch not in ("mini_vit", "mlp"):
            raise ConfigError(f"arch must be mini_vit or mlp, got {self.arch!r}")
        if self.optimizer not in ("sgd", "arrow"):
            raise ConfigError(f"optimizer must be sgd or arrow, got {self.optimizer!r}")
        if self.optimizer == "arrow" and self.arrow is None:
            raise ConfigError("optimizer 'arrow' requires an arrow config section")
        if self.model.tasks != self.stream.tasks:
            raise ConfigError(f"model.tasks {self.model.tasks} != stream.tasks {self.stream.tasks}")
        if self.model.classes_per_task != self.stream.classes_per_task:
            raise ConfigError("model and stream disagree on classes_per_task")
        if self.model.image_side != self.stream.image_side:
            raise ConfigError("model and stream disagree on image_side")
        for name in ("epochs_per_task", "batch_size", "metric_cadence", "probe_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be nonempty and distinct")


def _strict_kwargs(cls, obj: dict, where: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(obj) - names
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")
    return obj


def config_from_obj(obj: dict) -> ExperimentConfig:
    """Parse the documented JSON schema; unknown keys are rejected."""
    obj = dict(_strict_kwargs(ExperimentConfig, obj, "experiment config"))
    if "model" in obj:
        obj["model"] = MiniViTConfig(**_strict_kwargs(MiniViTConfig, obj["model"], "model"))
    if "stream" in obj:
        obj["stream"] = StreamConfig(**_strict_kwargs(StreamConfig, obj["stream"], "stream"))
    if obj.get("arrow") is not None:
        obj["arrow"] = ArrowConfig(**_strict_kwargs(ArrowConfig, obj["arrow"], "arrow"))
    if obj.get("cbp") is not None:
        obj["cbp"] = CbpConfig(**_strict_kwargs(CbpConfig, obj["cbp"], "cbp"))
    for key in ("seeds", "frozen_blocks"):
        if key in obj:
            obj[key] = tuple(obj[key])
    return ExperimentConfig(**obj)


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_obj(json.load(fh))


def config_to_obj(cfg: ExperimentConfig) -> dict:
    def plain(dc):
        return {f.name: getattr(dc, f.name) for f in fields(dc)}

    obj = plain(cfg)
    obj["model"] = plain(cfg.model)
    obj["stream"] = plain(cfg.stream)
    obj["arrow"] = plain(cfg.arrow) if cfg.arrow else None
    obj["cbp"] = plain(cfg.cbp) if cfg.cbp else None
    obj["seeds"] = list(cfg.seeds)
    obj["frozen_blocks"] = list(cfg.frozen_blocks)
    return obj


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(config_to_obj(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build_model(cfg: ExperimentConfig, seed: int) -> _ModelBase:
    if cfg.arch == "mlp":
        return build_mlp(matched_mlp_config(cfg.model), seed)
    return build(cfg.model, seed)


def _build_optimizer(cfg: ExperimentConfig, mdl: _ModelBase):
    if cfg.optimizer == "arrow":
        return ArrowOptimizer(list(mdl.groups.values()), cfg.arrow)
    return SgdOptimizer(cfg.eta)


def _reinit_seed(seed: int, task_index: int) -> int:
    return (seed + 1) * 1_000_003 + task_index


def evaluate(mdl: _ModelBase, xs: np.ndarray, ys: np.ndarray, task: int, chunk: int = 64) -> float:
    hits = 0
    for lo in range(0, len(xs), chunk):
        logits = mdl.forward(xs[lo:lo + chunk], task).data
        hits += int((logits.argmax(axis=1) == ys[lo:lo + chunk]).sum())
    return hits / len(xs)


def run_single(cfg: ExperimentConfig, seed: int, out_dir: str | None = None) -> PlasticityReport:
    """Train one seed through the full stream and log the metric suite.

    A NaN loss aborts this seed with a divergence record; partial metrics
    are kept. Artifacts (report.json, metrics.csv, final model/optimizer
    checkpoints) are written when out_dir is given.
    """
    stream = make_stream(cfg.stream)
    mdl = _build_model(cfg, seed)
    opt = _build_optimizer(cfg, mdl)
    ledger = UnitLedger(mdl, cfg.cbp, seed) if cfg.cbp else None
    report = PlasticityReport(seed=seed)
    gstep = 0

    for ti, task in enumerate(stream.tasks):
        if cfg.upper_bound:
            mdl.reinitialize(_reinit_seed(seed, ti))
            opt = _build_optimizer(cfg, mdl)
            if ledger is not None:
                ledger = UnitLedger(mdl, cfg.cbp, _reinit_seed(seed, ti))
        opt.on_task_start(ti)
        trainable = mdl.trainable_groups(ti, cfg.frozen_blocks)
        tensors = [g.tensor for g in trainable]

        diverged = False
        for epoch in range(cfg.epochs_per_task):
            order = derive_rng(seed, _TAG_TRAIN, ti, epoch).permutation(len(task.train_x))
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                capture = ActivationProbe(batch_size=len(idx)) if ledger is not None else None
                with ad.Tape() as tape:
                    logits = mdl.forward(task.train_x[idx], ti, capture)
                    loss = ad.cross_entropy(logits, task.train_y[idx])
                    if not np.isfinite(loss.data):
                        diverged = True
                        break
                    grads = tape.gradients(loss, tensors)
                for g in trainable:
                    g.tensor.data += opt.step(g, grads[g.tensor])
                gstep += 1
                if ledger is not None:
                    for rep in cbp_step(mdl, ledger, cfg.cbp, capture):
                        report.add(ti + 1, gstep, "units", rep.site, "cbp_replacement", float(rep.unit))
            if diverged:
                break
        if diverged:
            report.diverged_at_task = ti + 1
            break

        acc = evaluate(mdl, task.eval_x, task.eval_y, ti)
        report.record_accuracy(ti + 1, gstep, acc)
        if ti % cfg.metric_cadence == 0:
            _probe_metrics(mdl, stream, cfg, ti, gstep, report)

    if out_dir is not None:
        seed_dir = os.path.join(out_dir, f"seed{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        with open(os.path.join(seed_dir, "report.json"), "w") as fh:
            fh.write(report.to_json())
        with open(os.path.join(seed_dir, "metrics.csv"), "w") as fh:
            fh.write(report.to_csv())
        save_model(mdl, os.path.join(seed_dir, "model.json"))
        opt.save_state(os.path.join(seed_dir, "optimizer.json"))
    return report


def _probe_metrics(mdl: _ModelBase, stream: TaskStream, cfg: ExperimentConfig,
                   ti: int, gstep: int, report: PlasticityReport) -> None:
    task1 = ti + 1
    probe = probe_activations(mdl, stream.probe_batch(ti, cfg.probe_batch), ti)

    for name, arr in probe.features.items():
        rm = mx.rank_of_features(arr)
        report.add(task1, gstep, "features", name, "erank", rm.erank)
        report.add(task1, gstep, "features", name, "srank", rm.srank)
        report.add(task1, gstep, "features", name, "rank", rm.rank_r)

    if isinstance(mdl, MiniViT):
        cls_names = ["embed"] + [f"block{i}" for i in range(mdl.config.blocks)] + ["head"]
        for name, vecs in zip(cls_names, probe.cls_trace):
            rm = mx.rank_of_features(vecs)
            report.add(task1, gstep, "cls", name, "erank", rm.erank)
        for i in range(mdl.config.blocks):
            for proj in ("q", "k", "v"):
                w = mdl.groups[f"block{i}.attn.{proj}"].tensor.data
                for h, sl in enumerate(mx.head_slices(w, mdl.config.heads)):
                    rm = mx.rank_of_weights(sl)
                    report.add(task1, gstep, "heads", f"block{i}.attn.{proj}.h{h}", "erank", rm.erank)
                    report.add(task1, gstep, "heads", f"block{i}.attn.{proj}.h{h}", "srank", rm.srank)

    for site in mdl.ffn_sites:
        ua = mx.fau(probe, site.capture)
        report.add(task1, gstep, "units", site.name, "fau", ua.fau)
        report.add(task1, gstep, "units", site.name, "fdu", ua.fdu)

    for name, g in mdl.groups.items():
        w = g.tensor.data
        if w.ndim != 2:
            continue
        rm = mx.rank_of_weights(w)
        report.add(task1, gstep, "weights", name, "erank", rm.erank)
        report.add(task1, gstep, "weights", name, "srank", rm.srank)
        report.add(task1, gstep, "weights", name, "rank", rm.rank_r)
        report.add(task1, gstep, "weights", name, "frob", float(np.sqrt((w * w).sum())))


@dataclass
class RunRecord:
    """One experiment config run over several seeds."""

    label: str
    config: dict
    config_hash: str
    seeds: list[int]
    reports: list[PlasticityReport]

    @property
    def aats(self) -> list[float]:
        return [r.aat for r in self.reports if r.diverged_at_task is None]

    @property
    def aat_mean(self) -> float | None:
        return float(np.mean(self.aats)) if self.aats else None

    @property
    def aat_std(self) -> float | None:
        return float(np.std(self.aats)) if self.aats else None

    def mean_series(self, scope: str, component: str, metric: str) -> list[tuple[int, float]]:
        """Across-seed mean of one metric series (completed seeds only)."""
        per_task: dict[int, list[float]] = {}
        for rep in self.reports:
            if rep.diverged_at_task is not None:
                continue
            for t, v in rep.series(scope, component, metric):
                per_task.setdefault(t, []).append(v)
        return [(t, float(np.mean(vs))) for t, vs in sorted(per_task.items())]


def threads_from_env() -> int:
    raw = os.environ.get("PLAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"PLAB_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


def run(cfg: ExperimentConfig, out_dir: str | None = None, label: str | None = None,
        seeds: tuple[int, ...] | None = None) -> RunRecord:
    """Run every seed of a config; seeds execute independently and may run in
    parallel up to PLAB_THREADS workers without changing any output byte."""
    use_seeds = tuple(seeds) if seeds is not None else cfg.seeds
    workers = threads_from_env()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    if workers > 1 and len(use_seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run_single, [cfg] * len(use_seeds), use_seeds,
                                    [out_dir] * len(use_seeds)))
    else:
        reports = [run_single(cfg, s, out_dir) for s in use_seeds]
    record = RunRecord(
        label=label or f"{cfg.optimizer}-{config_hash(cfg)}",
        config=config_to_obj(cfg),
        config_hash=config_hash(cfg),
        seeds=list(use_seeds),
        reports=reports,
    )
    if out_dir is not None:
        with open(os.path.join(out_dir, "run_record.json"), "w") as fh:
            json.dump(_record_obj(record), fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")
    return record


def _record_obj(record: RunRecord) -> dict:
    return {
        "label": record.label,
        "config": record.config,
        "config_hash": record.config_hash,
        "seeds": record.seeds,
        "aat_per_seed": {str(r.seed): (None if r.diverged_at_task is not None else r.aat)
                         for r in record.reports},
        "aat_mean": record.aat_mean,
        "aat_std": record.aat_std,
    }


def load_record(out_dir: str) -> RunRecord:
    with open(os.path.join(out_dir, "run_record.json")) as fh:
        obj = json.load(fh)
    reports = []
    for seed in obj["seeds"]:
        with open(os.path.join(out_dir, f"seed{seed}", "report.json")) as fh:
            reports.append(PlasticityReport.from_json_obj(json.load(fh)))
    return RunRecord(obj["label"], obj["config"], obj["config_hash"], obj["seeds"], reports)


def compare(records: list[RunRecord]) -> str:
    """AAT mean/std table (CSV) over records sharing one stream; best first."""
    if not records:
        raise ConfigError("compare needs at least one run record")
    stream0 = records[0].config["stream"]
    for rec in records[1:]:
        if rec.config["stream"] != stream0:
            raise ConfigError(f"record {rec.label!r} ran on a different stream")
    rows = sorted(records, key=lambda r: -(r.aat_mean if r.aat_mean is not None else -1.0))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "aat_mean", "aat_std", "seeds"))
    for rec in rows:
        mean = "" if rec.aat_mean is None else repr(rec.aat_mean)
        std = "" if rec.aat_std is None else repr(rec.aat_std)
        w.writerow((rec.label, mean, std, len(rec.seeds)))
    return buf.getvalue()


def expand_grid(obj: dict) -> list[tuple[str, ExperimentConfig]]:
    """Expand a {"base": config, "grid": {alpha/beta/window/warmup lists}} file."""
    unknown = set(obj) - {"base", "grid"}
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in grid file")
    base = config_from_obj(obj["base"])
    if base.arrow is None:
        raise ConfigError("grid expansion requires an arrow section in the base config")
    grid = dict(obj.get("grid", {}))
    allowed = ("alpha", "beta", "window", "warmup")
    unknown = set(grid) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown grid axis(es) {sorted(unknown)}")
    axes = [(k, list(grid.get(k) or [getattr(base.arrow, k)])) for k in allowed]
    combos: list[tuple[str, ExperimentConfig]] = []

    def rec(i: int, chosen: dict):
        if i == len(axes):
            arrow = ArrowConfig(**{**{f.name: getattr(base.arrow, f.name) for f in fields(ArrowConfig)},
                                   **chosen})
            label = f"a{chosen['alpha']:g}_b{chosen['beta']:g}_w{chosen['window']}_{chosen['warmup']}"
            cfg_obj = config_to_obj(base)
            cfg_obj["optimizer"] = "arrow"
            cfg_obj["arrow"] = {f.name: getattr(arrow, f.name) for f in fields(ArrowConfig)}
            combos.append((label, config_from_obj(cfg_obj)))
            return
        key, values = axes[i]
        for v in values:
            rec(i + 1, {**chosen, key: v})

    rec(0, {})
    return combos
