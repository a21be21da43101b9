"""Training objectives for multi-domain graph classification.

Seven interchangeable objectives consume the same per-batch view (per-sample
losses, pooled penultimate features, domain ids) and produce a scalar loss
tensor:

* erm: plain mean loss.
* irm: ERM plus the squared per-domain gradient of the risk with respect to
  a scalar dummy multiplier on the logits (closed form, no second-order
  autodiff needed).
* vrex: ERM plus the population variance of per-domain mean risks.
* groupdro: exponentiated-gradient reweighting of per-domain risks.
* dann: ERM plus an adversarial domain classifier behind gradient reversal.
* coral: ERM plus mean squared Frobenius distance between per-domain feature
  covariances.
* mixup: convex combination of pooled representations and label losses.

With the penalty weight at zero (or lambda = 1 for mixup) every objective's
loss value coincides with ERM's bit for bit, which the tests pin down.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    add,
    cross_entropy,
    gather,
    gather_rows,
    grad_reverse,
    matmul,
    mul,
    relu,
    softmax_rows,
    sub,
    sum_axis0,
    sum_axis1,
    tmean,
    tsum,
)
from .errors import ConfigError, ContractError
from .backbones import Linear

DG_ALGORITHMS = ("erm", "irm", "vrex", "groupdro", "dann", "coral", "mixup")


@dataclass
class DGConfig:
    algorithm: str = "erm"
    penalty_weight: float = 1.0
    groupdro_step_size: float = 0.01
    mixup_alpha: float = 1.0
    dann_hidden: int = 64

    def validate(self):
        if self.algorithm not in DG_ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}",
                              path="dg.algorithm")
        if self.penalty_weight < 0:
            raise ConfigError(
                f"penalty_weight must be >= 0, got {self.penalty_weight}",
                path="dg.penalty_weight",
            )
        if self.groupdro_step_size <= 0:
            raise ConfigError(
                f"groupdro_step_size must be > 0, got {self.groupdro_step_size}",
                path="dg.groupdro_step_size",
            )
        if self.mixup_alpha <= 0:
            raise ConfigError(f"mixup_alpha must be > 0, got {self.mixup_alpha}",
                              path="dg.mixup_alpha")
        if self.dann_hidden < 1:
            raise ConfigError(f"dann_hidden must be >= 1, got {self.dann_hidden}",
                              path="dg.dann_hidden")
        return self


@dataclass
class DomainBatchView:
    """Everything an objective needs from one training batch."""

    losses: Tensor          # [m] per-sample task losses
    penultimate: Tensor     # [m, h]
    logits: Tensor          # [m, C]
    labels: np.ndarray      # [m]
    domain_ids: np.ndarray  # [m]
    domain_index: dict = field(default_factory=dict)  # id -> sample positions

    @classmethod
    def build(cls, logits, penultimate, labels, domain_ids):
        labels = np.asarray(labels)
        domain_ids = np.asarray(domain_ids)
        if labels.size == 0:
            raise ContractError("empty training batch")
        losses = cross_entropy(logits, labels, reduction="none")
        index = {int(d): np.flatnonzero(domain_ids == d)
                 for d in np.unique(domain_ids)}
        return cls(losses=losses, penultimate=penultimate, logits=logits,
                   labels=labels, domain_ids=domain_ids, domain_index=index)

    def domain_risks(self):
        """Mean task loss per domain present in the batch, as tensors."""
        return {d: tmean(gather(self.losses, idx))
                for d, idx in sorted(self.domain_index.items())}


def erm_loss(view):
    if view.labels.size == 0:
        raise ContractError("empty training batch")
    return tmean(view.losses)


def irm_penalty(view):
    """Sum over domains of the squared risk gradient w.r.t. a logit scale.

    For mean cross-entropy, d/dw R_e(w * logits) at w=1 equals the domain
    mean of <logits_i, softmax_i - onehot_i>, so the penalty needs no nested
    differentiation.
    """
    probs = softmax_rows(view.logits)
    m, c = view.logits.data.shape
    onehot = np.zeros((m, c))
    onehot[np.arange(m), view.labels] = 1.0
    inner = sum_axis1(mul(view.logits, sub(probs, Tensor(onehot))))
    penalty = None
    for _, idx in sorted(view.domain_index.items()):
        ge = tmean(gather(inner, idx))
        term = mul(ge, ge)
        penalty = term if penalty is None else add(penalty, term)
    return penalty


def vrex_loss(view, penalty_weight):
    """Batch-mean task loss plus weighted population variance of domain risks.

    The base term is the per-sample mean (not the mean of domain means) so a
    zero penalty weight reproduces ERM exactly even on unbalanced batches.
    """
    base = erm_loss(view)
    risks = list(view.domain_risks().values())
    k = len(risks)
    total = risks[0]
    for r in risks[1:]:
        total = add(total, r)
    rbar = mul(total, 1.0 / k)
    var = None
    for r in risks:
        d = sub(r, rbar)
        sq = mul(d, d)
        var = sq if var is None else add(var, sq)
    var = mul(var, 1.0 / k)
    return add(base, mul(var, penalty_weight))


def groupdro_step(view, q, step_size, domain_order):
    """Reweight domain risks by exponentiated gradient ascent on q.

    q is the persistent probability vector over all training domains in
    domain_order; domains absent from the batch keep their weight (their risk
    is treated as zero for the update). Returns (loss tensor, updated q).
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (len(domain_order),):
        raise ContractError(
            f"groupdro weights shape {q.shape} does not match "
            f"{len(domain_order)} domains"
        )
    if (q < 0).any() or abs(q.sum() - 1.0) > 1e-9:
        raise ContractError("groupdro weights are not a probability vector")
    risks = view.domain_risks()
    risk_values = np.array(
        [float(risks[d].data) if d in risks else 0.0 for d in domain_order]
    )
    new_q = q * np.exp(step_size * risk_values)
    new_q = new_q / new_q.sum()
    loss = None
    for pos, d in enumerate(domain_order):
        if d not in risks:
            continue
        term = mul(risks[d], float(new_q[pos]))
        loss = term if loss is None else add(loss, term)
    if loss is None:
        raise ContractError("no training domain present in batch")
    return loss, new_q


class DomainClassifier:
    """Two-layer MLP predicting the training domain from penultimate features."""

    def __init__(self, in_width, hidden, num_domains, rng):
        self.lin1 = Linear(in_width, hidden, rng, "dann.lin1")
        self.lin2 = Linear(hidden, num_domains, rng, "dann.lin2")

    def __call__(self, features):
        return self.lin2(relu(self.lin1(features)))

    def params(self):
        return self.lin1.params() + self.lin2.params()


def dann_loss(view, classifier, lam, domain_order):
    """Task loss plus lam times adversarial domain-classification loss.

    Features reach the classifier through gradient reversal scaled by lam, so
    backbone gradients push domain accuracy down while the classifier's own
    parameters push it up.
    """
    if len(domain_order) < 2:
        raise ConfigError(
            f"adversarial domain objective needs >= 2 training domains, "
            f"got {len(domain_order)}",
            path="dg.algorithm",
        )
    task = erm_loss(view)
    pos = {d: i for i, d in enumerate(domain_order)}
    try:
        dom_labels = np.array([pos[int(d)] for d in view.domain_ids])
    except KeyError as exc:
        raise ContractError(f"batch domain {exc} not in training domains") from None
    reversed_feats = grad_reverse(view.penultimate, lam)
    dom_ce = cross_entropy(classifier(reversed_feats), dom_labels)
    return add(task, mul(dom_ce, lam))


def _covariance(x_tensor, n):
    mean_row = mul(sum_axis0(x_tensor), 1.0 / n)
    centered = sub(x_tensor, mean_row)
    return mul(matmul(centered.T, centered), 1.0 / (n - 1))


def coral_penalty(view):
    """Mean over domain pairs of squared covariance distance / (4 d^2).

    Domains with fewer than two samples in the batch have no covariance and
    are skipped; if every pair is skipped the penalty is zero and a warning is
    emitted.
    """
    d_feat = view.penultimate.data.shape[1]
    covs = []
    for _, idx in sorted(view.domain_index.items()):
        if len(idx) < 2:
            continue
        covs.append(_covariance(gather_rows(view.penultimate, idx), len(idx)))
    if len(covs) < 2:
        warnings.warn("coral: fewer than two domains with >= 2 samples; penalty 0")
        return Tensor(0.0)
    total = None
    pairs = 0
    for i in range(len(covs)):
        for j in range(i + 1, len(covs)):
            diff = sub(covs[i], covs[j])
            term = tsum(mul(diff, diff))
            total = term if total is None else add(total, term)
            pairs += 1
    return mul(total, 1.0 / (pairs * 4.0 * d_feat * d_feat))


def mixup_batch(pooled, labels, alpha, rng, lam=None):
    """Convex-combine pooled rows with a random permutation partner.

    Returns (mixed tensor, permutation, lam). The caller runs the classifier
    head on the mixed rows and combines the two label losses with the same
    lam. Pass lam explicitly to pin the coefficient (used by tests).
    """
    if alpha <= 0:
        raise ConfigError(f"mixup_alpha must be > 0, got {alpha}",
                          path="dg.mixup_alpha")
    m = pooled.data.shape[0]
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(m)
    mixed = add(mul(pooled, lam), mul(gather_rows(pooled, perm), 1.0 - lam))
    return mixed, perm, lam


def mixup_loss(model_head, pooled, labels, alpha, rng, lam=None):
    mixed, perm, lam = mixup_batch(pooled, labels, alpha, rng, lam=lam)
    logits = model_head(mixed)
    labels = np.asarray(labels)
    loss_a = cross_entropy(logits, labels)
    loss_b = cross_entropy(logits, labels[perm])
    return add(mul(loss_a, lam), mul(loss_b, 1.0 - lam))


# ------------------------------------------------------------------ dispatcher


@dataclass
class DGState:
    """Per-run mutable pieces an objective carries across batches."""

    config: DGConfig
    domain_order: list
    groupdro_q: np.ndarray = None
    dann_classifier: DomainClassifier = None

    def extra_parameters(self):
        if self.dann_classifier is not None:
            return self.dann_classifier.params()
        return []


def make_dg_state(config, train_domain_ids, hidden_width, rng):
    config.validate()
    order = sorted(int(d) for d in set(train_domain_ids))
    state = DGState(config=config, domain_order=order)
    if config.algorithm == "groupdro":
        state.groupdro_q = np.full(len(order), 1.0 / len(order))
    if config.algorithm == "dann":
        if len(order) < 2:
            raise ConfigError(
                f"adversarial domain objective needs >= 2 training domains, "
                f"got {len(order)}",
                path="dg.algorithm",
            )
        state.dann_classifier = DomainClassifier(
            hidden_width, config.dann_hidden, len(order), rng
        )
    return state


def training_loss(state, model, output, labels, domain_ids, rng):
    """Scalar loss tensor for one batch under the configured objective."""
    cfg = state.config
    if cfg.algorithm == "mixup":
        return mixup_loss(model.head_logits, output.penultimate, labels,
                          cfg.mixup_alpha, rng)
    view = DomainBatchView.build(output.logits, output.penultimate,
                                 labels, domain_ids)
    if cfg.algorithm == "erm":
        return erm_loss(view)
    if cfg.algorithm == "irm":
        return add(erm_loss(view), mul(irm_penalty(view), cfg.penalty_weight))
    if cfg.algorithm == "vrex":
        return vrex_loss(view, cfg.penalty_weight)
    if cfg.algorithm == "groupdro":
        loss, state.groupdro_q = groupdro_step(
            view, state.groupdro_q, cfg.groupdro_step_size, state.domain_order
        )
        return loss
    if cfg.algorithm == "dann":
        return dann_loss(view, state.dann_classifier, cfg.penalty_weight,
                         state.domain_order)
    if cfg.algorithm == "coral":
        return add(erm_loss(view), mul(coral_penalty(view), cfg.penalty_weight))
    raise ConfigError(f"unknown algorithm {cfg.algorithm!r}", path="dg.algorithm")
