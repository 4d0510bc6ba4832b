"""Run directories: dataset resolution, training, artifacts and comparison."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import analysis
from .config import ConfigError, ExperimentConfig
from .data import (
    ArrayDataset,
    build_head_tail_split,
    build_longtail_profile,
    build_single_tail_profile,
    load_cifar,
    load_market1501,
    make_synthetic_embeddings,
    make_synthetic_retrieval,
    subset_dataset,
    write_manifest,
    write_profile_csv,
)
from .dml import DmlSchedule, evaluate_retrieval, make_retrieval_evaluator
from .losses import LossConfig
from .model import build_model, load_checkpoint, save_checkpoint
from .record import RunRecord
from .training import (
    ClsSchedule,
    evaluate_classifier,
    observe_jitter,
    predict,
    seed_everything,
    to_tensor,
    train_phase1,
    train_phase2,
)

log = logging.getLogger(__name__)


@dataclass
class Datasets:
    train: ArrayDataset
    test: ArrayDataset | None = None  # classification
    query: ArrayDataset | None = None  # retrieval
    gallery: ArrayDataset | None = None

    @property
    def retrieval(self) -> bool:
        return self.query is not None


def resolve_datasets(cfg: ExperimentConfig) -> Datasets:
    d, seed = cfg.data, cfg.experiment.seed
    if d.source in ("synthetic", "synthetic-one-tail"):
        if d.source == "synthetic":
            profile = build_longtail_profile(d.class_count, d.max_count, d.imbalance_ratio)
        else:
            profile = build_single_tail_profile(d.class_count, d.max_count, d.tail_count)
        train = make_synthetic_embeddings(d.class_count, d.dim, profile, d.within_class_scale, seed=seed)
        test = make_synthetic_embeddings(
            d.class_count,
            d.dim,
            [d.test_per_class] * d.class_count,
            d.within_class_scale,
            seed=seed + 10_000,
            class_means=train.class_means,
        )
        return Datasets(train, test=test)
    if d.source == "synthetic-retrieval":
        b = make_synthetic_retrieval(
            head_classes=d.head_classes,
            tail_classes=d.tail_classes,
            head_count=d.head_count,
            tail_count=d.tail_images_per_class,
            within_class_scale=d.within_class_scale,
            seed=seed,
        )
        return Datasets(b.train, query=b.query, gallery=b.gallery)
    if d.source.startswith("cifar"):
        name = "cifar100" if d.source == "cifar100" else "cifar10"
        full = load_cifar(name, d.data_root, train=True)
        test = load_cifar(name, d.data_root, train=False)
        n_cls = int(full.y.max()) + 1
        per_class = int(np.bincount(full.y).min())
        if d.source.endswith("one-tail"):
            profile = build_single_tail_profile(n_cls, per_class, d.tail_count)
        else:
            profile = build_longtail_profile(n_cls, per_class, d.imbalance_ratio)
        return Datasets(subset_dataset(full, profile, seed=seed), test=test)
    if d.source == "market1501":
        train, query, gallery = load_market1501(d.data_root)
        split = build_head_tail_split(np.unique(train.y), d.head_classes, d.tail_images_per_class)
        return Datasets(subset_dataset(train, split, seed=seed), query=query, gallery=gallery)
    raise ConfigError(f"data.source: {d.source!r}")


def make_schedule(cfg: ExperimentConfig):
    s, m = cfg.schedule, cfg.memory
    cls = DmlSchedule if cfg.experiment.task == "metric-learning" else ClsSchedule
    return cls(
        phase1_epochs=s.phase1_epochs,
        phase2_epochs=s.phase2_epochs,
        phase1_lr=s.phase1_lr,
        phase2_lr=s.phase2_lr,
        lr_decay_epochs=s.lr_decay_epochs,
        momentum=s.momentum,
        weight_decay=s.weight_decay,
        batch_size=s.batch_size,
        seed=cfg.experiment.seed,
        loss=LossConfig(eta=cfg.eta, alpha=cfg.loss.alpha, delta=cfg.loss.delta),
        beta=m.beta,
        memory_capacity=m.capacity,
        memory_batch=m.memory_batch,
        rj_sigma_ratio=m.rj_sigma_ratio,
        augment=s.augment,
    )


def make_model(cfg: ExperimentConfig, data: Datasets):
    num_classes = int(data.train.y.max()) + 1
    in_dim = data.train.x.shape[1] if data.train.x.ndim == 2 else None
    seed_everything(cfg.experiment.seed)
    return build_model(
        cfg.model.backbone,
        num_classes,
        embed_dim=cfg.model.embed_dim,
        in_dim=in_dim,
        hidden_dim=cfg.model.hidden_dim,
        normalize=cfg.experiment.task == "metric-learning",
    )


def _evaluator(data: Datasets):
    if data.retrieval:
        return make_retrieval_evaluator(data.query, data.gallery), data.query
    return evaluate_classifier, data.test


def _probes(train: ArrayDataset) -> tuple[int, int]:
    counts = np.bincount(train.y)
    tail = int(np.flatnonzero(counts == counts[counts > 0].min())[-1])
    return int(np.flatnonzero(train.y == tail)[0]), tail


def _summary(row: dict, prefix: str, counts, retrieval: bool) -> dict:
    if retrieval:
        return {f"{prefix}_mAP": row["mAP"], f"{prefix}_rank1": row["rank1"]}
    out = {f"{prefix}_top1": row["top1"]}
    per_class = row["per_class_top1"]
    tail = int(np.argmin(counts))
    out[f"{prefix}_tail_class_top1"] = per_class[tail]
    for k, v in analysis.shot_bucketed_accuracy(per_class, counts).items():
        out[f"{prefix}_{k}"] = v
    return out


def write_summary(path, summary: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in summary.items():
            w.writerow([k, f"{v:.6f}" if isinstance(v, float) else v])


def read_summary(path) -> dict:
    with open(path) as fh:
        rows = list(csv.reader(fh))[1:]
    out = {}
    for k, v in rows:
        try:
            out[k] = float(v)
        except ValueError:
            out[k] = v
    return out


def _write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration"] + [f"v{i}" for i in range(len(trace.vectors[0]))])
        for it, v in zip(trace.iterations, trace.vectors):
            w.writerow([it] + [f"{x:.10g}" for x in v])


def read_trace(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)[:, 1:]


def prepare_dir(out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "data").mkdir(exist_ok=True)
    return out


def write_data_artifacts(out: Path, data: Datasets) -> None:
    write_profile_csv(out / "data" / "profile.csv", np.bincount(data.train.y))
    write_manifest(out / "data" / "train.jsonl", data.train, "train")
    if data.test is not None:
        write_manifest(out / "data" / "test.jsonl", data.test, "test")
    else:
        write_manifest(out / "data" / "query.jsonl", data.query, "query")
        write_manifest(out / "data" / "gallery.jsonl", data.gallery, "gallery")


def run_phase1(cfg: ExperimentConfig, data: Datasets):
    model = make_model(cfg, data)
    schedule = make_schedule(cfg)
    evaluate, test = _evaluator(data)
    result = train_phase1(model, data.train, schedule, test=test, evaluate=evaluate)
    return model, schedule, result


def run_phase2(cfg, data, model, schedule, variant: str, out: Path, phase1_summary: dict) -> dict:
    evaluate, test = _evaluator(data)
    probe_index, probe_class = _probes(data.train)
    res = train_phase2(
        model, data.train, schedule, variant, test=test, evaluate=evaluate,
        probe_index=probe_index, probe_class=probe_class,
    )
    counts = np.bincount(data.train.y, minlength=model.num_classes)
    summary = {"task": cfg.experiment.task, "source": cfg.data.source, "variant": variant}
    summary.update(phase1_summary)
    summary.update(_summary(res.record.last("phase2"), "final", counts, data.retrieval))
    save_checkpoint(model, out / "checkpoints" / "final.pt")
    for bank, name in ((res.bank, "memory_bank.csv"), (res.proto_bank, "prototype_bank.csv")):
        if bank is not None:
            bank.dump_csv(out / name)
    if variant != "baseline":
        for kind, trace in res.traces.items():
            _write_trace(out / f"trace_phase2_{kind}.csv", trace)
            analysis.write_curve_csv(out / f"jitter_phase2_{kind}.csv", analysis.jitter_curve(trace))
    return {"record": res.record, "summary": summary, "model": model}


def run(cfg: ExperimentConfig, output_dir: str | Path | None = None) -> dict:
    """Train one configuration end to end and write its run directory."""
    cfg.validate()
    out = prepare_dir(Path(output_dir or cfg.experiment.output_dir))
    cfg.save(out / "config.ini")
    data = resolve_datasets(cfg)
    write_data_artifacts(out, data)

    model, schedule, p1 = run_phase1(cfg, data)
    save_checkpoint(model, out / "checkpoints" / "phase1.pt")
    counts = np.bincount(data.train.y, minlength=model.num_classes)
    phase1_summary = _summary(p1.record.last("phase1"), "phase1", counts, data.retrieval) if p1.record.epochs else {}

    if cfg.analysis.observe_epochs > 0:
        probe_index, probe_class = _probes(data.train)
        obs = observe_jitter(model, data.train, schedule, cfg.analysis.observe_epochs, probe_index, probe_class)
        for kind, trace in obs.traces.items():
            _write_trace(out / f"trace_{kind}.csv", trace)
            curve = analysis.jitter_curve(trace)
            analysis.write_curve_csv(out / f"jitter_{kind}.csv", curve)
            first, last = analysis.quarter_slopes(curve)
            phase1_summary[f"jitter_{kind}_final_variance"] = curve[-1][1]
            phase1_summary[f"jitter_{kind}_slope_ratio"] = last / first if first else float("nan")

    result = run_phase2(cfg, data, model, schedule, cfg.experiment.variant, out, phase1_summary)
    record = p1.record.extend(result["record"])
    record.write_jsonl(out / "metrics.jsonl")
    write_summary(out / "summary.csv", result["summary"])
    if cfg.analysis.export_embeddings:
        export_run_embeddings(model, data, out)
    return {"record": record, "summary": result["summary"], "output_dir": str(out)}


def ablate(cfg: ExperimentConfig, variants, output_dir: str | Path | None = None) -> dict:
    """Train phase 1 once, then run each variant's phase 2 from the same state."""
    cfg.validate()
    root = Path(output_dir or cfg.experiment.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    data = resolve_datasets(cfg)
    model, schedule, p1 = run_phase1(cfg, data)
    state = copy.deepcopy(model.state_dict())
    counts = np.bincount(data.train.y, minlength=model.num_classes)
    phase1_summary = _summary(p1.record.last("phase1"), "phase1", counts, data.retrieval) if p1.record.epochs else {}
    dirs = []
    for variant in variants:
        vcfg = copy.deepcopy(cfg)
        vcfg.experiment.variant = variant
        vcfg.analysis.observe_epochs = 0
        out = prepare_dir(root / variant.replace("+", "_"))
        vcfg.experiment.output_dir = str(out)
        vcfg.save(out / "config.ini")
        write_data_artifacts(out, data)
        model.load_state_dict(state)
        save_checkpoint(model, out / "checkpoints" / "phase1.pt")
        result = run_phase2(vcfg, data, model, schedule, variant, out, dict(phase1_summary))
        RunRecord("run", list(p1.record.epochs)).extend(result["record"]).write_jsonl(out / "metrics.jsonl")
        write_summary(out / "summary.csv", result["summary"])
        dirs.append(out)
    table = compare(dirs)
    write_comparison(root / "comparison.csv", table)
    return {"run_dirs": [str(d) for d in dirs], "table": table}


# -- post-hoc operations on run directories -----------------------------------------

def load_run(run_dir) -> tuple[ExperimentConfig, "torch.nn.Module", Datasets]:
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.load(run_dir / "config.ini")
    model = load_checkpoint(run_dir / "checkpoints" / "final.pt")
    return cfg, model, resolve_datasets(cfg)


def evaluate_run(run_dir) -> dict:
    cfg, model, data = load_run(run_dir)
    if data.retrieval:
        qe, _ = predict(model, to_tensor(data.query.x))
        ge, _ = predict(model, to_tensor(data.gallery.x))
        mAP, r1 = evaluate_retrieval(qe.numpy(), data.query.y, ge.numpy(), data.gallery.y,
                                     data.query.cameras, data.gallery.cameras)
        return {"mAP": mAP, "rank1": r1}
    res = evaluate_classifier(model, data.test)
    res.update(analysis.shot_bucketed_accuracy(res["per_class_top1"], np.bincount(data.train.y)))
    return res


def export_run_embeddings(model, data: Datasets, out: Path) -> list[str]:
    paths = []
    splits = {"train": data.train, "test": data.test, "query": data.query, "gallery": data.gallery}
    for name, ds in splits.items():
        if ds is not None:
            paths.append(analysis.export_embeddings(model, ds, out / f"embeddings_{name}.bin"))
    torch.save(model.read_prototypes(), out / "prototypes.pt")
    return paths


def compare(run_dirs) -> dict:
    """Align the numeric summary metrics of several runs; deltas are relative to the first."""
    summaries = [read_summary(Path(d) / "summary.csv") for d in run_dirs]
    if len(summaries) < 2:
        raise ValueError("compare needs at least two run directories")
    ref = summaries[0]
    for s, d in zip(summaries[1:], run_dirs[1:]):
        if s.get("task") != ref.get("task") or s.get("source") != ref.get("source"):
            raise ValueError(f"run {d} is not comparable with {run_dirs[0]} (task/dataset differ)")
    metrics = [k for k, v in ref.items() if isinstance(v, float)]
    rows = []
    for d, s in zip(run_dirs, summaries):
        row = {"run": str(d), "variant": s.get("variant", "")}
        for m in metrics:
            row[m] = s.get(m, float("nan"))
            row[f"delta_{m}"] = row[m] - ref[m]
        rows.append(row)
    return {"metrics": metrics, "rows": rows}


def write_comparison(path, table: dict) -> None:
    rows = table["rows"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def format_comparison(table: dict, metrics=None) -> str:
    metrics = metrics or [m for m in table["metrics"] if m.startswith("final_")] or table["metrics"]
    head = ["variant"] + [m for m in metrics] + [f"d_{m}" for m in metrics]
    lines = ["  ".join(f"{h:>16}" for h in head)]
    for r in table["rows"]:
        cells = [r["variant"]] + [f"{r[m]:.4f}" for m in metrics] + [f"{r['delta_' + m]:+.4f}" for m in metrics]
        lines.append("  ".join(f"{c:>16}" for c in cells))
    return "\n".join(lines)
