"""Experiment orchestration: config, training, selection, extraction, reports.

A run is fully described by one JSON config plus a seed. Training keeps the
checkpoint with the best in-distribution validation accuracy (strict
improvement, ties keep the earlier epoch), then computes the final metrics
from that checkpoint on the ID and OOD test splits. Every random draw comes
from a named stream of the run's seed hub, so repeating a (config, seed) pair
reproduces every artifact byte for byte.
"""

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Adam, backward
from .backbones import (
    BackboneConfig,
    Model,
    default_backbone_config,
    load_checkpoint,
    save_checkpoint,
)
from .dgalgos import DGConfig, make_dg_state, training_loss
from .encodings import rw_encoding
from .errors import ConfigError, TrainingDivergedError
from .genmetrics import (
    FeatureMatrix,
    analyze,
    logits_sidecar_path,
    write_feature_csv,
    write_logits_csv,
    write_report,
)
from .graphdata import batch_graphs, generate_dataset
from .rng import RngHub

OUT_ENV_VAR = "GRAPHSHIFT_OUT"
# eval batches this size: attention cost grows with the square of batch nodes
EVAL_CHUNK = 32

DATASET_DEFAULTS = {
    "kind": "motif",
    "shift": "basis",
    "spurious_strength": 0.9,
    "num_classes": 3,
    "n_train": 1000,
    "n_eval": 200,
}
OPTIMIZER_DEFAULTS = {
    "learning_rate": 1e-3,
    "weight_decay": 0.0,
    "batch_size": 32,
    "max_epochs": 30,
    "eval_every": 1,
}


# -------------------------------------------------------------- configuration


@dataclass
class ExperimentConfig:
    dataset: dict
    backbone: BackboneConfig
    dg: DGConfig
    seed: int
    out_dir: str
    learning_rate: float
    weight_decay: float
    batch_size: int
    max_epochs: int
    eval_every: int


def default_output_root():
    return os.environ.get(OUT_ENV_VAR, "runs")


def _dataset_from_dict(raw):
    raw = dict(raw or {})
    spec = dict(DATASET_DEFAULTS)
    for key, val in raw.items():
        if key not in DATASET_DEFAULTS and key not in ("seed", "n_per_split"):
            raise ConfigError(f"unknown dataset key {key!r}",
                              path=f"dataset.{key}")
        spec[key] = val
    if "n_per_split" in spec:
        spec.pop("n_train", None)
        spec.pop("n_eval", None)
    if spec["kind"] == "motif":
        spec.pop("spurious_strength", None)
    elif spec["kind"] == "feature":
        spec.pop("shift", None)
    return spec


def _backbone_from_dict(raw, num_classes):
    raw = dict(raw or {})
    kind = raw.pop("kind", None)
    if kind is None:
        raise ConfigError("backbone kind is required", path="backbone.kind")
    scale = raw.pop("scale", "desk")
    return default_backbone_config(kind, scale=scale, num_classes=num_classes,
                                   **raw)


def _dg_from_dict(raw):
    raw = dict(raw or {})
    cfg = DGConfig()
    for key, val in raw.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown objective key {key!r}", path=f"dg.{key}")
        setattr(cfg, key, val)
    return cfg.validate()


def config_from_dict(raw, seed_override=None, out_override=None):
    """Validate a raw config mapping into an ExperimentConfig.

    Errors name the offending dotted key. Defaults are applied here, once,
    so the resolved dump contains every effective value.
    """
    raw = dict(raw)
    known = {"dataset", "backbone", "dg", "seed", "seeds", "out_dir"}
    known |= set(OPTIMIZER_DEFAULTS)
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}", path=key)

    seed = seed_override if seed_override is not None else raw.get("seed")
    if seed is None:
        raise ConfigError("seed is required", path="seed")
    try:
        seed = int(seed)
    except (TypeError, ValueError):
        raise ConfigError(f"seed must be an integer, got {raw.get('seed')!r}",
                          path="seed") from None

    dataset = _dataset_from_dict(raw.get("dataset"))
    dataset.setdefault("seed", seed)
    backbone = _backbone_from_dict(raw.get("backbone"),
                                   int(dataset.get("num_classes", 3)))
    dg = _dg_from_dict(raw.get("dg"))

    opt = dict(OPTIMIZER_DEFAULTS)
    for key in OPTIMIZER_DEFAULTS:
        if key in raw:
            opt[key] = raw[key]
    if not opt["learning_rate"] > 0.0:
        raise ConfigError(f"learning_rate must be > 0, got {opt['learning_rate']}",
                          path="learning_rate")
    if opt["weight_decay"] < 0.0:
        raise ConfigError(f"weight_decay must be >= 0, got {opt['weight_decay']}",
                          path="weight_decay")
    if int(opt["batch_size"]) < 1:
        raise ConfigError(f"batch_size must be >= 1, got {opt['batch_size']}",
                          path="batch_size")
    if int(opt["max_epochs"]) < 0:
        raise ConfigError(f"max_epochs must be >= 0, got {opt['max_epochs']}",
                          path="max_epochs")
    if int(opt["eval_every"]) < 1:
        raise ConfigError(f"eval_every must be >= 1, got {opt['eval_every']}",
                          path="eval_every")

    out_dir = out_override or raw.get("out_dir") or default_output_root()
    return ExperimentConfig(
        dataset=dataset,
        backbone=backbone,
        dg=dg,
        seed=seed,
        out_dir=out_dir,
        learning_rate=float(opt["learning_rate"]),
        weight_decay=float(opt["weight_decay"]),
        batch_size=int(opt["batch_size"]),
        max_epochs=int(opt["max_epochs"]),
        eval_every=int(opt["eval_every"]),
    )


def resolved_config_dict(cfg):
    """Every effective setting, defaults included; stored beside artifacts."""
    return {
        "dataset": dict(cfg.dataset),
        "backbone": asdict(cfg.backbone),
        "dg": asdict(cfg.dg),
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
        "learning_rate": cfg.learning_rate,
        "weight_decay": cfg.weight_decay,
        "batch_size": cfg.batch_size,
        "max_epochs": cfg.max_epochs,
        "eval_every": cfg.eval_every,
    }


# ------------------------------------------------------------------- training


@dataclass
class RunArtifacts:
    out_dir: str
    checkpoint_path: str
    log_path: str
    id_feature_path: str
    ood_feature_path: str
    report_path: str
    report: object
    best_epoch: int
    best_id_val_accuracy: float


class _RwCache:
    """Per-graph walk encodings, computed once per run when the model needs them."""

    def __init__(self, steps, enabled):
        self.steps = steps
        self.enabled = enabled
        self._rows = {}

    def for_graphs(self, graphs):
        if not self.enabled:
            return None
        rows = []
        for g in graphs:
            mat = self._rows.get(id(g))
            if mat is None:
                mat = rw_encoding(g, self.steps).matrix
                self._rows[id(g)] = mat
            rows.append(mat)
        return np.vstack(rows)


def _forward_eval(model, graphs, rw_cache, chunk=EVAL_CHUNK):
    """Eval-mode logits and pooled features for a graph list, input order kept."""
    logits, pooled, labels = [], [], []
    for start in range(0, len(graphs), chunk):
        part = graphs[start : start + chunk]
        batch = batch_graphs(part)
        out = model.forward(batch, rw=rw_cache.for_graphs(part), train=False)
        logits.append(out.logits.data.copy())
        pooled.append(out.penultimate.data.copy())
        labels.append(batch.labels)
    return np.vstack(logits), np.vstack(pooled), np.concatenate(labels)


def _accuracy(model, graphs, rw_cache):
    logits, _, labels = _forward_eval(model, graphs, rw_cache)
    return 100.0 * float((logits.argmax(axis=1) == labels).mean())


def extract_features(model, graphs, split_tag, rw_cache=None, checkpoint_ref=""):
    """Penultimate rows plus logits for a split, ordered as the input list."""
    if rw_cache is None:
        rw_cache = _RwCache(model.cfg.rw_steps, model.cfg.uses_rw)
    logits, pooled, labels = _forward_eval(model, graphs, rw_cache)
    fm = FeatureMatrix(rows=pooled, labels=labels, split_tag=split_tag,
                       checkpoint_ref=checkpoint_ref).validate()
    return fm, logits


def run_training(cfg):
    """Train one configuration and leave every artifact under cfg.out_dir."""
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.resolved.json"), "w") as fh:
        json.dump(resolved_config_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")

    bundle = generate_dataset(cfg.dataset)
    hub = RngHub(cfg.seed)
    model = Model(cfg.backbone, bundle.feature_dim, hub.stream("model-init"))
    state = make_dg_state(cfg.dg, [g.domain_id for g in bundle.train],
                          cfg.backbone.hidden_width, hub.stream("dg-init"))
    opt = Adam(model.parameters() + state.extra_parameters(),
               learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    order_rng = hub.stream("batch-order")
    drop_rng = hub.stream("dropout")
    dg_rng = hub.stream("dg-train")
    rw_cache = _RwCache(cfg.backbone.rw_steps, cfg.backbone.uses_rw)

    ckpt_path = os.path.join(out, "best.ckpt.json")
    log_rows = []

    # untrained incumbent: epoch 0 is always a selection candidate
    best_acc = _accuracy(model, bundle.id_val, rw_cache)
    best_epoch = 0
    save_checkpoint(model, ckpt_path, seed=cfg.seed, epoch=0,
                    id_val_accuracy=best_acc)
    log_rows.append({"epoch": 0, "train_loss": None,
                     "id_val_accuracy": best_acc})

    n_train = len(bundle.train)
    for epoch in range(1, cfg.max_epochs + 1):
        perm = order_rng.permutation(n_train)
        epoch_losses = []
        for start in range(0, n_train, cfg.batch_size):
            part = [bundle.train[i] for i in perm[start : start + cfg.batch_size]]
            batch = batch_graphs(part)
            output = model.forward(batch, rw=rw_cache.for_graphs(part),
                                   train=True, rng=drop_rng)
            loss = training_loss(state, model, output, batch.labels,
                                 batch.domain_ids, dg_rng)
            val = float(loss.data)
            if not math.isfinite(val):
                raise TrainingDivergedError(
                    f"training loss became non-finite ({val}) at epoch {epoch}, "
                    f"batch {start // cfg.batch_size}; objective "
                    f"{cfg.dg.algorithm!r}, recent losses {epoch_losses[-3:]}"
                )
            opt.zero_grad()
            backward(loss)
            opt.step()
            epoch_losses.append(val)
        row = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses))}
        if epoch % cfg.eval_every == 0:
            acc = _accuracy(model, bundle.id_val, rw_cache)
            row["id_val_accuracy"] = acc
            if acc > best_acc:  # strict: ties keep the earlier checkpoint
                best_acc = acc
                best_epoch = epoch
                save_checkpoint(model, ckpt_path, seed=cfg.seed, epoch=epoch,
                                id_val_accuracy=acc)
        log_rows.append(row)

    log_path = os.path.join(out, "log.jsonl")
    with open(log_path, "w") as fh:
        for row in log_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    best_model, _ = load_checkpoint(ckpt_path)
    id_path = os.path.join(out, "id_test.csv")
    ood_path = os.path.join(out, "ood_test.csv")
    id_fm, id_logits = extract_features(best_model, bundle.id_test, "id_test",
                                        rw_cache, checkpoint_ref=ckpt_path)
    ood_fm, ood_logits = extract_features(best_model, bundle.ood_test,
                                          "ood_test", rw_cache,
                                          checkpoint_ref=ckpt_path)
    write_feature_csv(id_fm, id_path)
    write_feature_csv(ood_fm, ood_path)
    write_logits_csv("id_test", id_fm.labels, id_logits,
                     logits_sidecar_path(id_path))
    write_logits_csv("ood_test", ood_fm.labels, ood_logits,
                     logits_sidecar_path(ood_path))

    report = analyze(id_fm, ood_fm, id_logits=id_logits, ood_logits=ood_logits)
    report_path = os.path.join(out, "report.json")
    write_report(report, report_path)
    return RunArtifacts(
        out_dir=out,
        checkpoint_path=ckpt_path,
        log_path=log_path,
        id_feature_path=id_path,
        ood_feature_path=ood_path,
        report_path=report_path,
        report=report,
        best_epoch=best_epoch,
        best_id_val_accuracy=best_acc,
    )


# ------------------------------------------------------------------ seed grid


def _grid_worker(job):
    raw_json, seed, out_dir = job
    cfg = config_from_dict(json.loads(raw_json), seed_override=seed,
                           out_override=out_dir)
    artifacts = run_training(cfg)
    return artifacts.out_dir


def run_seed_grid(raw_cfg, seeds, out_root, parallel=1):
    """Independent runs over a seed list, each in its own subdirectory."""
    raw_json = json.dumps(raw_cfg)
    jobs = [(raw_json, int(s), os.path.join(out_root, f"seed_{int(s)}"))
            for s in seeds]
    if parallel <= 1 or len(jobs) == 1:
        return [_grid_worker(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=int(parallel)) as pool:
        return list(pool.map(_grid_worker, jobs))


# ---------------------------------------------------------------- aggregation


def aggregate_runs(run_dirs):
    """Mean metrics per (objective, backbone) pair over a list of run dirs.

    Read-only: nothing under the run directories is touched.
    """
    groups = {}
    for run_dir in run_dirs:
        with open(os.path.join(run_dir, "report.json")) as fh:
            report = json.load(fh)
        with open(os.path.join(run_dir, "config.resolved.json")) as fh:
            cfg = json.load(fh)
        key = (cfg["dg"]["algorithm"], cfg["backbone"]["kind"])
        groups.setdefault(key, []).append(report)

    def mean_of(reports, field):
        vals = [r[field] for r in reports if r.get(field) is not None]
        return float(np.mean(vals)) if vals else None

    rows = []
    for (algo, kind) in sorted(groups):
        reports = groups[(algo, kind)]
        rows.append({
            "algorithm": algo,
            "backbone": kind,
            "n_runs": len(reports),
            "id_accuracy": mean_of(reports, "id_accuracy"),
            "ood_accuracy": mean_of(reports, "ood_accuracy"),
            "gap": mean_of(reports, "gap"),
            "silhouette": mean_of(reports, "silhouette"),
            "mmd_squared": mean_of(reports, "mmd_squared"),
        })
    return rows


TABLE_COLUMNS = ("algorithm", "backbone", "n_runs", "id_accuracy",
                 "ood_accuracy", "gap", "silhouette", "mmd_squared")


def render_table(rows):
    """Fixed-width text table; the JSON rows stay the source of truth."""

    def fmt(v):
        if v is None:
            return "n/a"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    cells = [[fmt(r[c]) for c in TABLE_COLUMNS] for r in rows]
    header = [c for c in TABLE_COLUMNS]
    widths = [max(len(h), *(len(row[i]) for row in cells)) if cells else len(h)
              for i, h in enumerate(header)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for row in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"
