import math

import numpy as np
import pytest

from graphshift.autodiff import Adam, Tensor, add, backward, cross_entropy, mul
from graphshift.backbones import BackboneConfig, Linear, Model
from graphshift.dgalgos import (
    DGConfig,
    DomainBatchView,
    DomainClassifier,
    coral_penalty,
    dann_loss,
    erm_loss,
    groupdro_step,
    irm_penalty,
    make_dg_state,
    mixup_batch,
    mixup_loss,
    training_loss,
    vrex_loss,
)
from graphshift.errors import ConfigError, ContractError
from graphshift.graphdata import Graph, batch_graphs


def view_from_losses(values, domain_ids, penultimate=None):
    values = np.asarray(values, dtype=np.float64)
    domain_ids = np.asarray(domain_ids)
    if penultimate is None:
        penultimate = np.zeros((len(values), 2))
    return DomainBatchView(
        losses=Tensor(values),
        penultimate=Tensor(np.asarray(penultimate, dtype=np.float64)),
        logits=Tensor(np.zeros((len(values), 2))),
        labels=np.zeros(len(values), dtype=np.int64),
        domain_ids=domain_ids,
        domain_index={int(d): np.flatnonzero(domain_ids == d)
                      for d in np.unique(domain_ids)},
    )


def view_from_logits(logits, labels, domain_ids):
    return DomainBatchView.build(
        Tensor(np.asarray(logits, dtype=np.float64)),
        Tensor(np.zeros((len(labels), 2))),
        np.asarray(labels),
        np.asarray(domain_ids),
    )


# ------------------------------------------------------------------------- erm


def test_erm_is_plain_mean():
    assert float(erm_loss(view_from_losses([1.0, 3.0], [0, 0])).data) == 2.0
    assert float(erm_loss(view_from_losses([0.7], [0])).data) == 0.7


def test_empty_batch_rejected():
    with pytest.raises(ContractError):
        DomainBatchView.build(Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 2))),
                              np.array([], dtype=np.int64), np.array([]))


def test_erm_equals_vrex_one_domain_no_penalty(rng):
    v = view_from_losses(rng.random(6), np.zeros(6))
    assert float(vrex_loss(v, 0.0).data) == float(erm_loss(v).data)


# ------------------------------------------------------------------------- irm


def test_irm_zero_logits_zero_penalty():
    v = view_from_logits([[0.0, 0.0]], [0], [0])
    assert float(irm_penalty(v).data) == 0.0


def test_irm_hand_value():
    v = view_from_logits([[1.0, -1.0]], [0], [0])
    p0 = 1.0 / (1.0 + math.exp(-2.0))
    g = 2.0 * (p0 - 1.0)
    assert abs(g - (-0.2384)) < 1e-4
    pen = float(irm_penalty(v).data)
    assert pen == pytest.approx(g * g, abs=1e-12)
    assert pen == pytest.approx(0.05684, abs=1e-4)


def _numeric_irm(logits, labels, domain_ids, h=1e-5):
    def risk(w, idx):
        z = w * logits[idx]
        z = z - z.max(axis=1, keepdims=True)
        ls = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return -ls[np.arange(len(idx)), labels[idx]].mean()

    total = 0.0
    for d in np.unique(domain_ids):
        idx = np.flatnonzero(domain_ids == d)
        g = (risk(1.0 + h, idx) - risk(1.0 - h, idx)) / (2 * h)
        total += g * g
    return total


def test_irm_matches_finite_difference(rng):
    for _ in range(8):
        m, c = 7, 3
        logits = rng.normal(size=(m, c)) * 2.0
        labels = rng.integers(0, c, size=m)
        domains = rng.integers(0, 2, size=m)
        if len(np.unique(domains)) < 2:
            domains[0] = 0
            domains[1] = 1
        got = float(irm_penalty(view_from_logits(logits, labels, domains)).data)
        want = _numeric_irm(logits, labels.astype(np.int64), domains)
        assert got == pytest.approx(want, rel=1e-4, abs=1e-10)


def test_irm_zero_weight_total_is_erm_bitwise(rng):
    v = view_from_logits(rng.normal(size=(5, 3)), rng.integers(0, 3, 5),
                         [0, 0, 1, 1, 1])
    total = add(erm_loss(v), mul(irm_penalty(v), 0.0))
    assert float(total.data) == float(erm_loss(v).data)


def test_irm_penalty_nonnegative(rng):
    for _ in range(10):
        v = view_from_logits(rng.normal(size=(6, 4)), rng.integers(0, 4, 6),
                             rng.integers(0, 3, 6))
        assert float(irm_penalty(v).data) >= 0.0


# ------------------------------------------------------------------------ vrex


def test_vrex_zero_variance():
    v = view_from_losses([0.5, 0.5, 0.5, 0.5], [0, 0, 1, 1])
    assert float(vrex_loss(v, 1.0).data) == pytest.approx(0.5, abs=1e-15)


def test_vrex_hand_value():
    # domain risks 0 and 1; mean 0.5, population variance 0.25
    v = view_from_losses([0.0, 0.0, 1.0, 1.0], [0, 0, 1, 1])
    assert float(vrex_loss(v, 1.0).data) == pytest.approx(0.75, abs=1e-15)


def test_vrex_zero_weight_is_erm_bitwise_unbalanced(rng):
    vals = rng.random(7)
    v = view_from_losses(vals, [0, 0, 0, 0, 0, 1, 1])
    assert float(vrex_loss(v, 0.0).data) == float(erm_loss(v).data)


# -------------------------------------------------------------------- groupdro


def test_groupdro_hand_update():
    v = view_from_losses([1.0, 0.0], [0, 1])
    loss, q = groupdro_step(v, np.array([0.5, 0.5]), math.log(2.0), [0, 1])
    np.testing.assert_allclose(q, [2.0 / 3.0, 1.0 / 3.0], atol=1e-12)
    assert float(loss.data) == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_groupdro_zero_risks_keep_weights():
    v = view_from_losses([0.0, 0.0], [0, 1])
    q0 = np.array([0.3, 0.7])
    _, q = groupdro_step(v, q0, 0.5, [0, 1])
    np.testing.assert_array_equal(q, q0)


def test_groupdro_simplex_preserved(rng):
    q = np.array([0.25, 0.25, 0.5])
    for _ in range(500):
        vals = rng.random(6)
        v = view_from_losses(vals, rng.integers(0, 3, 6))
        try:
            _, q = groupdro_step(v, q, 0.1, [0, 1, 2])
        except ContractError:
            pytest.fail("weights left the simplex")
        assert (q >= 0).all() and abs(q.sum() - 1.0) <= 1e-9


def test_groupdro_rejects_bad_weights():
    v = view_from_losses([1.0, 2.0], [0, 1])
    with pytest.raises(ContractError):
        groupdro_step(v, np.array([0.6, 0.6]), 0.1, [0, 1])
    with pytest.raises(ContractError):
        groupdro_step(v, np.array([1.2, -0.2]), 0.1, [0, 1])


def test_groupdro_absent_domain_keeps_relative_weight():
    v = view_from_losses([1.0, 1.0], [0, 0])
    _, q = groupdro_step(v, np.array([0.5, 0.5]), 1.0, [0, 1])
    assert q[0] > q[1]
    assert abs(q.sum() - 1.0) <= 1e-12


# ------------------------------------------------------------------------ dann


def test_dann_needs_two_domains():
    with pytest.raises(ConfigError):
        make_dg_state(DGConfig(algorithm="dann"), [0, 0, 0], 4,
                      np.random.default_rng(0))


def test_dann_zero_weight_is_erm_bitwise(rng):
    v = view_from_logits(rng.normal(size=(6, 3)), rng.integers(0, 3, 6),
                         [0, 0, 0, 1, 1, 1])
    clf = DomainClassifier(2, 8, 2, rng)
    total = dann_loss(v, clf, 0.0, [0, 1])
    assert float(total.data) == float(erm_loss(v).data)


def test_dann_classifier_learns_separable_domains(rng):
    feats = np.vstack([rng.normal(loc=2.0, size=(20, 2)),
                       rng.normal(loc=-2.0, size=(20, 2))])
    doms = np.repeat([0, 1], 20)
    clf = DomainClassifier(2, 8, 2, rng)
    opt = Adam([p for _, p in clf.params()], learning_rate=0.05)
    loss_val = None
    for _ in range(200):
        opt.zero_grad()
        ce = cross_entropy(clf(Tensor(feats)), doms)
        backward(ce)
        opt.step()
        loss_val = float(ce.data)
    assert loss_val < 0.1


def test_dann_reversal_direction(rng):
    # through the reversal, feature gradients are the exact negation of the
    # plain (unreversed) domain-loss gradients at lam=1
    v = view_from_logits(rng.normal(size=(4, 3)), rng.integers(0, 3, 4),
                         [0, 0, 1, 1])
    feats = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    v.penultimate = feats
    clf = DomainClassifier(2, 8, 2, rng)
    dom_labels = np.array([0, 0, 1, 1])
    backward(cross_entropy(clf(feats), dom_labels))
    g_direct = feats.grad.copy()
    feats.grad = None
    backward(dann_loss(v, clf, 1.0, [0, 1]))
    np.testing.assert_allclose(feats.grad, -g_direct, atol=1e-12)


# ----------------------------------------------------------------------- coral


def test_coral_identical_domains_zero(rng):
    base = rng.normal(size=(5, 3))
    feats = np.vstack([base, base])
    v = view_from_losses(np.ones(10), np.repeat([0, 1], 5), penultimate=feats)
    assert float(coral_penalty(v).data) == 0.0


def test_coral_hand_value_one_dim():
    feats = np.array([[0.0], [2.0], [0.0], [4.0]])
    v = view_from_losses(np.ones(4), [0, 0, 1, 1], penultimate=feats)
    assert float(coral_penalty(v).data) == pytest.approx(9.0, abs=1e-12)


def test_coral_symmetric_under_domain_swap():
    feats = np.array([[0.0, 1.0], [2.0, 0.0], [1.0, 1.0],
                      [0.0, 3.0], [4.0, 1.0], [2.0, 2.0]])
    a = view_from_losses(np.ones(6), [0, 0, 0, 1, 1, 1], penultimate=feats)
    b = view_from_losses(np.ones(6), [1, 1, 1, 0, 0, 0], penultimate=feats)
    assert float(coral_penalty(a).data) == float(coral_penalty(b).data)


def test_coral_skips_singleton_domains():
    feats = np.array([[0.0], [2.0], [0.0], [4.0], [9.0]])
    v = view_from_losses(np.ones(5), [0, 0, 1, 1, 2], penultimate=feats)
    assert float(coral_penalty(v).data) == pytest.approx(9.0, abs=1e-12)


def test_coral_all_singletons_warns():
    feats = np.array([[1.0], [2.0]])
    v = view_from_losses(np.ones(2), [0, 1], penultimate=feats)
    with pytest.warns(UserWarning):
        assert float(coral_penalty(v).data) == 0.0


# ----------------------------------------------------------------------- mixup


def test_mixup_midpoint():
    pooled = Tensor(np.array([[2.0, 0.0], [0.0, 2.0]]))
    # seed 3 pairs the two rows with each other
    mixed, perm, lam = mixup_batch(pooled, [0, 1], 1.0, np.random.default_rng(3),
                                   lam=0.5)
    assert lam == 0.5
    assert list(perm) == [1, 0]
    for row in mixed.data:
        np.testing.assert_allclose(row, [1.0, 1.0], atol=1e-15)


def test_mixup_lambda_one_is_erm_bitwise(rng):
    pooled = Tensor(rng.normal(size=(6, 4)))
    labels = rng.integers(0, 3, size=6)
    head = Linear(4, 3, rng, "head")
    mixed_loss = mixup_loss(head, pooled, labels, 1.0,
                            np.random.default_rng(3), lam=1.0)
    plain = cross_entropy(head(pooled), labels)
    assert float(mixed_loss.data) == float(plain.data)


def test_mixup_preserves_shape_and_is_deterministic(rng):
    pooled = Tensor(rng.normal(size=(5, 3)))
    m1, p1, l1 = mixup_batch(pooled, np.zeros(5, int), 2.0,
                             np.random.default_rng(7))
    m2, p2, l2 = mixup_batch(pooled, np.zeros(5, int), 2.0,
                             np.random.default_rng(7))
    assert m1.data.shape == (5, 3)
    assert l1 == l2
    np.testing.assert_array_equal(p1, p2)
    np.testing.assert_array_equal(m1.data, m2.data)


# ------------------------------------------------------------------ dispatcher


def _tiny_batch(rng, n_graphs=6):
    graphs = []
    for i in range(n_graphs):
        n = int(rng.integers(4, 7))
        mask = np.triu(rng.random((n, n)) < 0.5, k=1)
        e = np.argwhere(mask)
        if len(e) == 0:
            e = np.array([[0, 1]])
        graphs.append(Graph(n, e, rng.normal(size=(n, 2)),
                            int(rng.integers(0, 3)), int(i % 2)))
    return batch_graphs(graphs)


@pytest.mark.parametrize(
    "algorithm", ["erm", "irm", "vrex", "groupdro", "dann", "coral", "mixup"]
)
def test_dispatcher_produces_finite_scalar(algorithm, rng):
    model = Model(BackboneConfig("vgin", 2, 8, dropout=0.0), 2,
                  np.random.default_rng(0))
    batch = _tiny_batch(rng)
    out = model.forward(batch, train=False)
    cfg = DGConfig(algorithm=algorithm, penalty_weight=0.5)
    state = make_dg_state(cfg, batch.domain_ids, 8, np.random.default_rng(1))
    loss = training_loss(state, model, out, batch.labels, batch.domain_ids,
                         np.random.default_rng(2))
    assert loss.data.size == 1
    assert np.isfinite(loss.data)
    backward(loss)
    assert any(np.abs(p.grad).max() > 0 for p in model.parameters()
               if p.grad is not None)


@pytest.mark.parametrize("algorithm", ["irm", "vrex", "dann", "coral"])
def test_degenerate_penalty_matches_erm(algorithm, rng):
    model = Model(BackboneConfig("vgin", 2, 8, dropout=0.0), 2,
                  np.random.default_rng(0))
    batch = _tiny_batch(rng)
    out = model.forward(batch, train=False)
    erm_state = make_dg_state(DGConfig(algorithm="erm"), batch.domain_ids, 8,
                              np.random.default_rng(1))
    erm_val = float(training_loss(erm_state, model, out, batch.labels,
                                  batch.domain_ids, np.random.default_rng(2)).data)
    cfg = DGConfig(algorithm=algorithm, penalty_weight=0.0)
    state = make_dg_state(cfg, batch.domain_ids, 8, np.random.default_rng(1))
    got = float(training_loss(state, model, out, batch.labels,
                              batch.domain_ids, np.random.default_rng(2)).data)
    assert got == erm_val


def test_dgconfig_validation():
    with pytest.raises(ConfigError, match="algorithm"):
        DGConfig(algorithm="dro").validate()
    with pytest.raises(ConfigError):
        DGConfig(penalty_weight=-1.0).validate()
    with pytest.raises(ConfigError):
        DGConfig(groupdro_step_size=0.0).validate()
    with pytest.raises(ConfigError):
        DGConfig(mixup_alpha=0.0).validate()
