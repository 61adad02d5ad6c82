import math

import numpy as np
import numpy.testing as npt
import pytest

from core.autodiff import Parameter, Tape, Tensor, backward, concat_rows, frozen, grad_check, take_rows
from core.errors import ConfigurationError, ContractError
from core.losses import (
    LossTerms,
    conditional_disc_loss,
    conditional_gen_loss,
    marginal_disc_loss,
    marginal_gen_loss,
    neighbor_distribution,
    sum_terms,
    supervised_ce_loss,
    total_dirl_loss,
    triplet_distribution_loss,
)
from core.networks import classify, discriminate_class, discriminate_domain, features, init_bundle
from schemas.config import LossWeights, TripletConfig

LN2 = math.log(2.0)


def _log_softmax_rows(logits):
    out = []
    for row in logits:
        top = max(row)
        norm = top + math.log(sum(math.exp(v - top) for v in row))
        out.append([v - norm for v in row])
    return out


def brute_force_triplet(features, labels, margin, sigma_sq):
    """Nested-loop reference: normalize, build each q_a, average KLs, hinge, sum."""
    rows = []
    for f in features:
        norm = math.sqrt(sum(v * v for v in f))
        rows.append([v / norm for v in f])
    m = len(rows)

    def q(a):
        logits = [-sum((rows[i][d] - rows[a][d]) ** 2 for d in range(len(rows[a]))) / sigma_sq for i in range(m)]
        top = max(logits)
        total = sum(math.exp(v - top) for v in logits)
        return [math.exp(v - top) / total for v in logits]

    dists = [q(a) for a in range(m)]

    def kl(p, r):
        return sum(pi * math.log(pi / ri) for pi, ri in zip(p, r) if pi > 0)

    loss = 0.0
    for a in range(m):
        positives = [p for p in range(m) if p != a and labels[p] == labels[a]]
        negatives = [n for n in range(m) if labels[n] != labels[a]]
        if not positives or not negatives:
            continue
        pos = sum(kl(dists[a], dists[p]) for p in positives) / len(positives)
        neg = sum(kl(dists[a], dists[n]) for n in negatives) / len(negatives)
        loss += max(0.0, pos - neg + margin)
    return loss


def _random_triplet_batch(rng, max_size=12, dim=4):
    m = int(rng.integers(3, max_size + 1))
    labels = rng.integers(0, 3, size=m)
    labels[0], labels[1] = 0, 1
    return rng.normal(size=(m, dim)), labels


class TestAdversarialTerms:
    def test_uncertain_discriminator(self):
        loss = marginal_disc_loss(Tensor(np.zeros((5, 2))), Tensor(np.zeros((3, 2))))
        assert loss.item() == pytest.approx(2 * LN2, abs=1e-12)

    def test_uncertain_generator(self):
        assert marginal_gen_loss(Tensor(np.zeros((4, 2)))).item() == pytest.approx(LN2, abs=1e-12)

    def test_matches_per_example_sum(self, rng):
        src, tgt = rng.normal(size=(6, 2)), rng.normal(size=(9, 2))
        expected = (-sum(row[0] for row in _log_softmax_rows(src)) / 6
                    - sum(row[1] for row in _log_softmax_rows(tgt)) / 9)
        assert marginal_disc_loss(Tensor(src), Tensor(tgt)).item() == pytest.approx(expected, abs=1e-9)
        gen = -sum(row[0] for row in _log_softmax_rows(tgt)) / 9
        assert marginal_gen_loss(Tensor(tgt)).item() == pytest.approx(gen, abs=1e-9)

    def test_conditional_is_marginal_on_class_subset(self, bundle, rng):
        zs = features(bundle, rng.normal(size=(6, 2)))
        zt = features(bundle, rng.normal(size=(4, 2)))
        c_src, c_tgt = discriminate_class(bundle, 1, zs), discriminate_class(bundle, 1, zt)
        assert conditional_disc_loss(c_src, c_tgt, 1).item() == marginal_disc_loss(c_src, c_tgt).item()
        assert conditional_gen_loss(c_tgt, 1).item() == marginal_gen_loss(c_tgt).item()

    def test_conditional_terms_add_up(self):
        per_class = [conditional_gen_loss(Tensor(np.zeros((3, 2))), k) for k in range(3)]
        assert sum_terms(per_class).item() == pytest.approx(3 * LN2, abs=1e-12)
        disc = conditional_disc_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))), 0)
        assert disc.item() == pytest.approx(2 * LN2, abs=1e-12)

    def test_empty_side_skips_class(self):
        assert conditional_disc_loss(None, Tensor(np.zeros((2, 2))), 0) is None
        assert conditional_gen_loss(None, 1) is None


class TestSupervised:
    def test_confident_correct_prediction(self):
        loss = supervised_ce_loss(Tensor([[10.0, -10.0]]), [0])
        assert loss.item() == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)

    def test_uniform_two_classes(self):
        assert supervised_ce_loss(Tensor(np.zeros((4, 2))), [0, 1, 1, 0]).item() == pytest.approx(LN2)

    def test_random_matches_oracle(self, rng):
        logits = rng.normal(size=(7, 3))
        labels = rng.integers(0, 3, size=7)
        expected = -sum(row[y] for row, y in zip(_log_softmax_rows(logits), labels)) / 7
        assert supervised_ce_loss(Tensor(logits), labels).item() == pytest.approx(expected, abs=1e-9)

    def test_target_side_adds(self):
        both = supervised_ce_loss(Tensor(np.zeros((2, 2))), [0, 1], Tensor(np.zeros((3, 2))), [1, 1, 0])
        assert both.item() == pytest.approx(2 * LN2)
        only_target = supervised_ce_loss(None, None, Tensor(np.zeros((3, 2))), [1, 1, 0])
        assert only_target.item() == pytest.approx(LN2)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            supervised_ce_loss(Tensor(np.zeros((2, 2))), [0, 2])

    def test_nothing_labeled(self):
        with pytest.raises(ContractError):
            supervised_ce_loss(None, None)


class TestNeighborDistribution:
    def test_two_points(self):
        z = Tensor([[0.0, 0.0], [1.0, 1.0]])
        q = neighbor_distribution(z, 0, 0.5).values[0]
        logits = np.array([0.0, -2.0 / 0.5])
        npt.assert_allclose(q, np.exp(logits) / np.exp(logits).sum(), atol=1e-12)

    def test_equidistant_points_tie(self):
        z = Tensor([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        q = neighbor_distribution(z, 0, 0.5).values[0]
        assert q[1] == pytest.approx(q[2], abs=1e-15)

    def test_flat_kernel_is_uniform(self, rng):
        q = neighbor_distribution(Tensor(rng.normal(size=(5, 3))), 2, 1e12).values[0]
        npt.assert_allclose(q, np.full(5, 0.2), atol=1e-6)

    def test_single_row_rejected(self):
        with pytest.raises(ContractError):
            neighbor_distribution(Tensor([[1.0, 0.0]]), 0, 0.5)


class TestTripletLoss:
    cfg = TripletConfig(margin=1.0, sigma_sq=0.5)

    def test_fixed_batch_matches_nested_loops(self, rng):
        x = rng.normal(size=(6, 3))
        labels = np.array([0, 0, 0, 1, 1, 1])
        expected = brute_force_triplet(x.tolist(), labels.tolist(), 1.0, 0.5)
        assert triplet_distribution_loss(Tensor(x), labels, self.cfg).item() == pytest.approx(expected, abs=1e-9)

    def test_random_batches_match_nested_loops(self, rng):
        for _ in range(200):
            x, labels = _random_triplet_batch(rng)
            margin = float(rng.uniform(0.0, 2.0))
            sigma_sq = float(rng.uniform(0.1, 2.0))
            cfg = TripletConfig(margin=margin, sigma_sq=sigma_sq)
            expected = brute_force_triplet(x.tolist(), labels.tolist(), margin, sigma_sq)
            assert triplet_distribution_loss(Tensor(x), labels, cfg).item() == pytest.approx(expected, abs=1e-9)

    def test_permutation_invariance(self, rng):
        for _ in range(20):
            x, labels = _random_triplet_batch(rng)
            order = rng.permutation(len(labels))
            a = triplet_distribution_loss(Tensor(x), labels, self.cfg).item()
            b = triplet_distribution_loss(Tensor(x[order]), labels[order], self.cfg).item()
            assert a == pytest.approx(b, abs=1e-9)

    def test_scale_invariance(self, rng):
        x, labels = _random_triplet_batch(rng)
        a = triplet_distribution_loss(Tensor(x), labels, self.cfg).item()
        b = triplet_distribution_loss(Tensor(37.5 * x), labels, self.cfg).item()
        assert a == pytest.approx(b, abs=1e-9)

    def test_collapsed_features_cost_margin_per_anchor(self):
        x = np.ones((6, 2))
        labels = [0, 0, 0, 1, 1, 1]
        cfg = TripletConfig(margin=0.3, sigma_sq=0.5)
        assert triplet_distribution_loss(Tensor(x), labels, cfg).item() == pytest.approx(6 * 0.3, abs=1e-12)

    def test_satisfied_margin_hinges_to_zero(self):
        x = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
        cfg = TripletConfig(margin=0.01, sigma_sq=0.1)
        assert triplet_distribution_loss(Tensor(x), [0, 0, 1, 1], cfg).item() == 0.0

    def test_single_class_is_zero(self, rng):
        loss = triplet_distribution_loss(Tensor(rng.normal(size=(4, 2))), [1, 1, 1, 1], self.cfg)
        assert loss.item() == 0.0

    def test_singleton_anchor_skipped(self, rng):
        x = rng.normal(size=(5, 2))
        labels = [0, 0, 1, 1, 2]
        expected = brute_force_triplet(x.tolist(), labels, 1.0, 0.5)
        assert triplet_distribution_loss(Tensor(x), labels, self.cfg).item() == pytest.approx(expected, abs=1e-9)

    def test_non_negative(self, rng):
        for _ in range(50):
            x, labels = _random_triplet_batch(rng)
            assert triplet_distribution_loss(Tensor(x), labels, self.cfg).item() >= 0.0


class TestTotal:
    def _terms(self, rng):
        return LossTerms(
            classification=Tensor(rng.uniform(0.1, 2.0)),
            marginal=Tensor(rng.uniform(0.1, 2.0)),
            conditional=Tensor(rng.uniform(0.1, 2.0)),
            triplet=Tensor(rng.uniform(0.1, 2.0)),
        )

    def test_all_zero_weights(self, rng):
        weights = LossWeights(classification=0, marginal=0, conditional=0, triplet=0)
        assert total_dirl_loss(self._terms(rng), weights).item() == 0.0

    def test_classification_only_is_cross_entropy(self, rng):
        terms = self._terms(rng)
        weights = LossWeights(marginal=0, conditional=0, triplet=0)
        assert total_dirl_loss(terms, weights).item() == terms.classification.item()

    def test_unit_weights_sum_terms(self, rng):
        terms = self._terms(rng)
        expected = sum(v for v in terms.values().values())
        assert total_dirl_loss(terms, LossWeights()).item() == pytest.approx(expected, abs=1e-12)

    def test_weights_scale_terms(self, rng):
        terms = self._terms(rng)
        weights = LossWeights(classification=2.0, marginal=0.5, conditional=0.0, triplet=3.0)
        v = terms.values()
        expected = 2.0 * v["classification"] + 0.5 * v["marginal"] + 3.0 * v["triplet"]
        assert total_dirl_loss(terms, weights).item() == pytest.approx(expected, abs=1e-12)

    def test_missing_terms_skipped(self, rng):
        terms = LossTerms(classification=Tensor(0.7))
        assert total_dirl_loss(terms, LossWeights()).item() == pytest.approx(0.7)

    def test_negative_weight(self, rng):
        weights = LossWeights.model_construct(classification=1.0, marginal=-1.0, conditional=1.0, triplet=1.0)
        with pytest.raises(ConfigurationError):
            total_dirl_loss(self._terms(rng), weights)


class TestGradients:
    """Backprop against central differences for every term and the composed objective."""

    cfg = TripletConfig(margin=20.0, sigma_sq=0.5)

    @pytest.fixture
    def small_bundle(self):
        return init_bundle(2, 4, 2, hidden_spec=(5,), seed=11)

    @pytest.fixture
    def batch(self, rng):
        return {
            "xs": rng.normal(size=(4, 2)),
            "ys": np.array([0, 0, 1, 1]),
            "xt_labeled": rng.normal(size=(2, 2)),
            "yt_labeled": np.array([0, 1]),
            "xt_unlabeled": rng.normal(size=(2, 2)),
        }

    def test_triplet_fragment(self, rng):
        leaf = Parameter(rng.normal(size=(8, 3)), name="z")
        labels = [0, 0, 0, 0, 1, 1, 1, 1]
        report = grad_check(lambda: triplet_distribution_loss(leaf.tensor, labels, self.cfg), [leaf])
        assert report.passed, report.max_rel_error

    def test_adversarial_and_supervised_fragments(self, rng):
        src = Parameter(rng.normal(size=(4, 2)), name="src_logits")
        tgt = Parameter(rng.normal(size=(4, 2)), name="tgt_logits")
        fragments = [
            lambda: marginal_disc_loss(src.tensor, tgt.tensor),
            lambda: marginal_gen_loss(tgt.tensor),
            lambda: conditional_disc_loss(src.tensor, tgt.tensor, 0),
            lambda: conditional_gen_loss(tgt.tensor, 0),
            lambda: supervised_ce_loss(src.tensor, [0, 1, 1, 0], tgt.tensor, [1, 1, 0, 0]),
        ]
        for fragment in fragments:
            assert grad_check(fragment, [src, tgt]).passed

    def test_discriminator_loss_through_networks(self, small_bundle, batch):
        xt = np.vstack([batch["xt_labeled"], batch["xt_unlabeled"]])

        def fragment():
            return marginal_disc_loss(
                discriminate_domain(small_bundle, features(small_bundle, batch["xs"])),
                discriminate_domain(small_bundle, features(small_bundle, xt)),
            )

        report = grad_check(fragment, small_bundle.feature_params() + small_bundle.domain_params())
        assert report.passed, [c.name for c in report.failures]

    def test_composed_objective(self, small_bundle, batch):
        xt = np.vstack([batch["xt_labeled"], batch["xt_unlabeled"]])
        triplet_labels = np.concatenate([batch["ys"], batch["yt_labeled"]])

        def fragment():
            zs = features(small_bundle, batch["xs"])
            zt = features(small_bundle, xt)
            zt_labeled = take_rows(zt, [0, 1])
            conditional = [
                conditional_gen_loss(discriminate_class(small_bundle, k, take_rows(zt_labeled, [k])), k)
                for k in range(2)
            ]
            terms = LossTerms(
                classification=supervised_ce_loss(classify(small_bundle, zs), batch["ys"]),
                marginal=marginal_gen_loss(discriminate_domain(small_bundle, zt)),
                conditional=sum_terms(conditional),
                triplet=triplet_distribution_loss(concat_rows([zs, zt_labeled]), triplet_labels, self.cfg),
            )
            return total_dirl_loss(terms, LossWeights())

        report = grad_check(fragment, small_bundle.parameters())
        assert report.passed, [c.name for c in report.failures]

    def test_frozen_discriminators_report_zero_gradient(self, small_bundle, batch):
        def fragment():
            return marginal_gen_loss(discriminate_domain(small_bundle, features(small_bundle, batch["xs"])))

        with frozen(small_bundle.domain_params()):
            report = grad_check(fragment, small_bundle.parameters())
        checks = report.by_name()
        assert report.passed
        assert checks["d.0.weight"].frozen
        assert checks["d.0.weight"].max_abs_grad == 0.0


def test_triplet_gradient_matches_torch(rng):
    torch = pytest.importorskip("torch")

    x = rng.normal(size=(7, 3))
    labels = [0, 0, 0, 1, 1, 1, 1]
    cfg = TripletConfig(margin=1.0, sigma_sq=0.5)
    leaf = Parameter(x, name="z")
    with Tape() as tape:
        loss = triplet_distribution_loss(leaf.tensor, labels, cfg)
    backward(tape, loss)

    t = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    z = t / t.norm(dim=1, keepdim=True)
    dist = ((z[:, None, :] - z[None, :, :]) ** 2).sum(-1)
    log_q = torch.log_softmax(-dist / cfg.sigma_sq, dim=1)
    q = log_q.exp()
    kl = (q[:, None, :] * (log_q[:, None, :] - log_q[None, :, :])).sum(-1)
    y = torch.tensor(labels)
    same = y[:, None] == y[None, :]
    pos = (same & ~torch.eye(len(labels), dtype=torch.bool)).double()
    neg = (~same).double()
    per_anchor = (kl * pos).sum(1) / pos.sum(1) - (kl * neg).sum(1) / neg.sum(1) + cfg.margin
    expected = torch.relu(per_anchor).sum()
    expected.backward()

    assert loss.item() == pytest.approx(expected.item(), abs=1e-10)
    npt.assert_allclose(leaf.grad, t.grad.numpy(), atol=1e-9)
