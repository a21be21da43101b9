"""Post-hoc generalization analysis over penultimate-layer features.

Given feature matrices for an in-distribution and an out-of-distribution test
split, this module computes:

* squared maximum mean discrepancy between the two feature sets, using an
  exponential L1 kernel whose bandwidth is the reciprocal of the median
  off-diagonal pairwise L1 distance over the pooled rows (biased V-statistic,
  diagonal terms included);
* the mean silhouette score of the pooled rows with class labels as clusters
  (Euclidean distances, singleton clusters scored zero);
* accuracies in percent and their difference (the ID-OOD gap), when logits
  are available;
* a 2-D principal-component projection for plotting.

The CSV feature-matrix format is the model-agnostic boundary: any system can
produce `split,label,f0,...` files and get the same report.
"""

import csv
import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import ContractError, MetricUndefinedError, ShapeError

SPLIT_TAGS = ("id_test", "ood_test")
DEFAULT_ROW_CAP = 5000
REPORT_DECIMALS = 10


# ----------------------------------------------------------------- kernel MMD


def median_l1_bandwidth(x):
    """1 / median of off-diagonal pairwise L1 distances; 1.0 if that median is 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError("bandwidth needs at least 2 rows")
    med = float(np.median(pdist(x, metric="cityblock")))
    if med == 0.0:
        return 1.0
    return 1.0 / med


def mmd_squared(x, y, gamma):
    """Biased squared MMD with kernel exp(-gamma * L1 distance).

    All three double sums include their diagonal terms, so identical inputs
    cancel to exactly zero.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(
            f"mmd_squared: incompatible shapes {x.shape} and {y.shape}"
        )
    if x.shape[0] < 1 or y.shape[0] < 1:
        raise ContractError("mmd_squared needs nonempty inputs")
    n, m = x.shape[0], y.shape[0]
    kxx = np.exp(-gamma * cdist(x, x, metric="cityblock"))
    kyy = np.exp(-gamma * cdist(y, y, metric="cityblock"))
    kxy = np.exp(-gamma * cdist(x, y, metric="cityblock"))
    return kxx.sum() / (n * n) + kyy.sum() / (m * m) - 2.0 * (kxy.sum() / (n * m))


# ------------------------------------------------------------------ silhouette


def silhouette_samples(x, labels, chunk=512):
    """Per-row silhouette values (b - a) / max(a, b) with Euclidean distances."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or len(labels) != x.shape[0]:
        raise ShapeError(
            f"silhouette: rows {x.shape} do not match labels {labels.shape}"
        )
    uniq, inverse = np.unique(labels, return_inverse=True)
    if len(uniq) < 2:
        raise MetricUndefinedError(
            "silhouette needs at least two clusters, got one"
        )
    n, k = x.shape[0], len(uniq)
    member = np.zeros((n, k))
    member[np.arange(n), inverse] = 1.0
    counts = member.sum(axis=0)
    out = np.zeros(n)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d = cdist(x[start:stop], x, metric="euclidean")
        sums = d @ member  # [chunk, k] total distance to each cluster
        for row, i in enumerate(range(start, stop)):
            ci = inverse[i]
            if counts[ci] <= 1:
                continue  # singleton cluster scores 0
            a = sums[row, ci] / (counts[ci] - 1)
            other = [sums[row, c] / counts[c] for c in range(k) if c != ci]
            b = min(other)
            denom = max(a, b)
            out[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return out


def silhouette(x, labels):
    """Mean of the per-row silhouette values over all rows."""
    return float(silhouette_samples(x, labels).mean())


# -------------------------------------------------------------------- accuracy


def accuracy_and_gap(id_logits, id_labels, ood_logits, ood_labels):
    """Argmax accuracy of each split in percent and their plain difference."""

    def acc(logits, labels):
        logits = np.asarray(logits, dtype=np.float64)
        labels = np.asarray(labels)
        if logits.ndim != 2 or logits.shape[0] == 0:
            raise ContractError("accuracy needs a nonempty 2-D logit array")
        if logits.shape[0] != labels.shape[0]:
            raise ShapeError(
                f"accuracy: {logits.shape[0]} logit rows vs {labels.shape[0]} labels"
            )
        return 100.0 * float((logits.argmax(axis=1) == labels).mean())

    id_acc = acc(id_logits, id_labels)
    ood_acc = acc(ood_logits, ood_labels)
    return id_acc, ood_acc, id_acc - ood_acc


# ------------------------------------------------------------------ projection


def pca_project_2d(x, tol=1e-9, max_iter=10000):
    """Project rows onto the top two principal directions.

    Power iteration with one deflation step; directions with (numerically)
    zero variance yield all-zero coordinates.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError("projection needs at least 2 rows")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    scale = float(np.abs(cov).max())
    coords = np.zeros((x.shape[0], 2))
    if scale == 0.0:
        return coords
    rng = np.random.default_rng(0)  # fixed seed: projection is deterministic

    def dominant(mat):
        v = rng.normal(size=mat.shape[0])
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = mat @ v
            norm = np.linalg.norm(w)
            if norm <= tol * scale:
                return None, 0.0
            v = w / norm
            lam = float(v @ mat @ v)
            # residual, not eigenvalue delta: bounds the direction error
            if np.linalg.norm(mat @ v - lam * v) <= tol * scale:
                return v, lam
        return v, lam

    v1, lam1 = dominant(cov)
    if v1 is None:
        return coords
    coords[:, 0] = xc @ v1
    deflated = cov - lam1 * np.outer(v1, v1)
    v2, lam2 = dominant(deflated)
    if v2 is not None and lam2 > tol * scale:
        coords[:, 1] = xc @ v2
    return coords


# ------------------------------------------------------------- feature matrix


@dataclass
class FeatureMatrix:
    rows: np.ndarray       # [n, d]
    labels: np.ndarray     # [n] class indices
    split_tag: str         # id_test | ood_test
    checkpoint_ref: str = ""

    def validate(self):
        if self.rows.ndim != 2 or self.rows.shape[0] < 1:
            raise ContractError("feature matrix needs at least one row")
        if self.labels.shape != (self.rows.shape[0],):
            raise ShapeError(
                f"labels shape {self.labels.shape} does not match "
                f"{self.rows.shape[0]} rows"
            )
        if (self.labels < 0).any():
            raise ContractError("negative class label in feature matrix")
        if self.split_tag not in SPLIT_TAGS:
            raise ContractError(f"split tag must be one of {SPLIT_TAGS}, "
                                f"got {self.split_tag!r}")
        return self


def _write_rows_csv(path, split_tag, labels, data, prefix):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    d = data.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "label"] + [f"{prefix}{i}" for i in range(d)])
        for label, row in zip(labels, data):
            w.writerow([split_tag, int(label)] + [repr(float(v)) for v in row])


def _read_rows_csv(path, prefix):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ContractError(f"{path}: empty file") from None
        if header[:2] != ["split", "label"]:
            raise ContractError(
                f"{path}: header must start with 'split,label', got {header[:2]}"
            )
        d = len(header) - 2
        expected = [f"{prefix}{i}" for i in range(d)]
        if header[2:] != expected:
            raise ContractError(
                f"{path}: value columns must be {prefix}0..{prefix}{d - 1}"
            )
        split_tag = None
        labels, rows = [], []
        for line_no, rec in enumerate(reader, 2):
            if not rec:
                continue
            if len(rec) != 2 + d:
                raise ContractError(f"{path}:{line_no}: expected {2 + d} fields")
            if split_tag is None:
                split_tag = rec[0]
            elif rec[0] != split_tag:
                raise ContractError(f"{path}:{line_no}: mixed split tags")
            try:
                labels.append(int(rec[1]))
                rows.append([float(v) for v in rec[2:]])
            except ValueError as exc:
                raise ContractError(f"{path}:{line_no}: {exc}") from None
    if not rows:
        raise ContractError(f"{path}: no data rows")
    return split_tag, np.array(labels, dtype=np.int64), np.array(rows)


def write_feature_csv(fm, path):
    fm.validate()
    _write_rows_csv(path, fm.split_tag, fm.labels, fm.rows, "f")


def read_feature_csv(path):
    split_tag, labels, rows = _read_rows_csv(path, "f")
    return FeatureMatrix(rows=rows, labels=labels, split_tag=split_tag,
                         checkpoint_ref=path).validate()


def write_logits_csv(split_tag, labels, logits, path):
    _write_rows_csv(path, split_tag, labels, np.asarray(logits), "l")


def read_logits_csv(path):
    split_tag, labels, rows = _read_rows_csv(path, "l")
    return split_tag, labels, rows


def logits_sidecar_path(feature_csv_path):
    base = feature_csv_path
    if base.endswith(".csv"):
        base = base[:-4]
    return base + ".logits.csv"


# ---------------------------------------------------------------------- report


@dataclass
class MetricsReport:
    mmd_squared: float
    silhouette: float          # None when undefined (single pooled class)
    gamma_used: float
    n_id: int
    n_ood: int
    id_accuracy: float = None  # None when logits were not provided
    ood_accuracy: float = None
    gap: float = None
    accuracies_present: bool = False
    silhouette_error: str = None


def _round_float(v):
    if v is None:
        return None
    return round(float(v), REPORT_DECIMALS)


def report_to_json(report):
    """Canonical report serialization: sorted keys, floats at 10 decimals."""
    payload = {
        "accuracies_present": bool(report.accuracies_present),
        "gamma_used": _round_float(report.gamma_used),
        "gap": _round_float(report.gap),
        "id_accuracy": _round_float(report.id_accuracy),
        "mmd_squared": _round_float(report.mmd_squared),
        "n_id": int(report.n_id),
        "n_ood": int(report.n_ood),
        "ood_accuracy": _round_float(report.ood_accuracy),
        "silhouette": _round_float(report.silhouette),
        "silhouette_error": report.silhouette_error,
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def write_report(report, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(report_to_json(report))


def _subsample(rows, labels, keep, rng):
    idx = np.sort(rng.choice(rows.shape[0], size=keep, replace=False))
    return rows[idx], labels[idx]


def analyze(id_features, ood_features, id_logits=None, ood_logits=None,
            row_cap=DEFAULT_ROW_CAP):
    """Compose the full report from two feature matrices and optional logits.

    Pooled rows beyond row_cap are subsampled with a fixed seed (proportional
    across the two splits) before the quadratic-cost metrics.
    """
    id_features.validate()
    ood_features.validate()
    if id_features.rows.shape[1] != ood_features.rows.shape[1]:
        raise ShapeError(
            f"feature widths differ: {id_features.rows.shape[1]} vs "
            f"{ood_features.rows.shape[1]}"
        )
    n_id, n_ood = id_features.rows.shape[0], ood_features.rows.shape[0]
    xi, yi = id_features.rows, id_features.labels
    xo, yo = ood_features.rows, ood_features.labels
    total = n_id + n_ood
    if total > row_cap:
        rng = np.random.default_rng(0)
        keep_id = max(1, row_cap * n_id // total)
        keep_ood = max(1, row_cap - keep_id)
        xi, yi = _subsample(xi, yi, min(keep_id, n_id), rng)
        xo, yo = _subsample(xo, yo, min(keep_ood, n_ood), rng)

    pooled = np.vstack([xi, xo])
    pooled_labels = np.concatenate([yi, yo])
    gamma = median_l1_bandwidth(pooled)
    mmd = mmd_squared(xi, xo, gamma)
    sil, sil_err = None, None
    try:
        sil = silhouette(pooled, pooled_labels)
    except MetricUndefinedError as exc:
        sil_err = str(exc)

    report = MetricsReport(mmd_squared=mmd, silhouette=sil, gamma_used=gamma,
                           n_id=n_id, n_ood=n_ood, silhouette_error=sil_err)
    if id_logits is not None and ood_logits is not None:
        li = np.asarray(id_logits)
        lo = np.asarray(ood_logits)
        if li.shape[0] != n_id or lo.shape[0] != n_ood:
            raise ShapeError(
                f"logit row counts ({li.shape[0]}, {lo.shape[0]}) do not match "
                f"feature row counts ({n_id}, {n_ood})"
            )
        id_acc, ood_acc, gap = accuracy_and_gap(
            li, id_features.labels, lo, ood_features.labels
        )
        report.id_accuracy = id_acc
        report.ood_accuracy = ood_acc
        report.gap = gap
        report.accuracies_present = True
    return report
