import math

import numpy as np
import pytest
import torch

from s4lfsc.exceptions import ContractError
from s4lfsc.losses import (
    class_prototypes,
    directional_consistency,
    fsl_episode_loss,
    mr_loss,
    pairwise_distances,
    proto_log_probs,
    rm_loss,
    sslcl_loss,
    stage_total,
)

EPS = 1e-8


# brute-force references
def _brute_fsl(support, support_labels, queries, query_labels, n, squared=False):
    prototypes = [support[support_labels == m].mean(axis=0) for m in range(n)]
    total = 0.0
    for q, label in zip(queries, query_labels):
        distances = []
        for p in prototypes:
            sq = sum((a - b) ** 2 for a, b in zip(q, p))
            distances.append(sq if squared else math.sqrt(sq))
        logits = [-d for d in distances]
        top = max(logits)
        log_norm = top + math.log(sum(math.exp(v - top) for v in logits))
        total -= logits[label] - log_norm
    return total


def _brute_entropy(p):
    return -sum(v * math.log(max(v, EPS)) for v in p)


def _brute_direction(a, b):
    rows = len(a)
    kl = sum(
        sum(x * (math.log(max(x, EPS)) - math.log(max(y, EPS))) for x, y in zip(ra, rb))
        for ra, rb in zip(a, b)
    ) / rows
    sharpness = sum(_brute_entropy(r) for r in a) / rows
    mean = [sum(r[j] for r in a) / rows for j in range(len(a[0]))]
    return kl + sharpness - _brute_entropy(mean)


def _brute_sslcl(z1, z2):
    return 0.5 * (_brute_direction(z1, z2) + _brute_direction(z2, z1))


def _softmax_rows(rng, rows, n):
    logits = rng.normal(scale=2.0, size=(rows, n))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TestPrototypeLoss:
    """Test prototypes, distances and the episode loss"""

    def test_oracle(self):
        """Test against a scalar re-implementation on random small episodes"""
        rng = np.random.default_rng(0)
        for trial in range(1000):
            n = int(rng.integers(2, 9))
            shots = int(rng.integers(1, 4))
            dim = int(rng.integers(1, 17))
            support = rng.normal(size=(n * shots, dim))
            support_labels = np.repeat(np.arange(n), shots)
            queries = rng.normal(size=(n * 2, dim))
            query_labels = np.repeat(np.arange(n), 2)
            squared = bool(trial % 2)

            prototypes = class_prototypes(
                torch.from_numpy(support), torch.from_numpy(support_labels), n
            )
            log_probs = proto_log_probs(torch.from_numpy(queries), prototypes, squared)
            loss = fsl_episode_loss(log_probs, torch.from_numpy(query_labels)).item()
            expected = _brute_fsl(support, support_labels, queries, query_labels, n, squared)
            assert loss == pytest.approx(expected, abs=1e-9, rel=1e-9)

    def test_euclidean_is_unsquared(self):
        """Test the default distance is the plain Euclidean norm"""
        q = torch.tensor([[3.0, 4.0]])
        p = torch.tensor([[0.0, 0.0]])
        assert pairwise_distances(q, p).item() == pytest.approx(5.0)
        assert pairwise_distances(q, p, squared=True).item() == pytest.approx(25.0)

    def test_log_probs_normalize(self):
        """Test query probabilities sum to one"""
        log_probs = proto_log_probs(torch.rand(5, 4), torch.rand(3, 4))
        torch.testing.assert_close(log_probs.exp().sum(dim=1), torch.ones(5))

    def test_missing_prototype_class(self):
        """Test a class without support features violates the contract"""
        with pytest.raises(ContractError):
            class_prototypes(torch.rand(2, 3), torch.tensor([0, 0]), 2)

    def test_coincident_query_has_finite_gradient(self):
        """Test a query sitting on a prototype keeps gradients finite"""
        q = torch.zeros(1, 3, requires_grad=True)
        loss = fsl_episode_loss(proto_log_probs(q, torch.zeros(2, 3)), torch.tensor([0]))
        loss.backward()
        assert torch.isfinite(q.grad).all()

    def test_query_order_invariance(self):
        """Test permuting queries together with their labels keeps the loss"""
        rng = np.random.default_rng(5)
        for _ in range(100):
            n, rows = int(rng.integers(2, 9)), int(rng.integers(2, 30))
            log_probs = proto_log_probs(
                torch.from_numpy(rng.normal(size=(rows, 8))),
                torch.from_numpy(rng.normal(size=(n, 8))),
            )
            labels = torch.from_numpy(rng.integers(0, n, size=rows))
            order = torch.from_numpy(rng.permutation(rows))
            assert fsl_episode_loss(log_probs[order], labels[order]).item() == pytest.approx(
                fsl_episode_loss(log_probs, labels).item(), abs=1e-9
            )

    def test_distance_shift_invariance(self):
        """Test adding a constant to every distance changes neither probabilities nor argmax"""
        rng = np.random.default_rng(6)
        for _ in range(100):
            queries = torch.from_numpy(rng.normal(size=(12, 5)))
            prototypes = torch.from_numpy(rng.normal(size=(int(rng.integers(2, 9)), 5)))
            shift = float(rng.uniform(-50, 50))
            log_probs = proto_log_probs(queries, prototypes)
            shifted = torch.log_softmax(-(pairwise_distances(queries, prototypes) + shift), dim=1)
            torch.testing.assert_close(shifted, log_probs)
            assert torch.equal(shifted.argmax(dim=1), log_probs.argmax(dim=1))


class TestAuxiliaryLosses:
    """Test the transform-classification and reconstruction objectives"""

    def test_rm_loss_oracle(self):
        """Test mean cross-entropy against a scalar reference"""
        rng = np.random.default_rng(1)
        for _ in range(1000):
            rows = int(rng.integers(1, 9))
            k = int(rng.choice([4, 6]))
            logits = rng.normal(size=(rows, k))
            labels = rng.integers(0, k, size=rows)
            expected = 0.0
            for row, label in zip(logits, labels):
                top = row.max()
                expected -= row[label] - (top + math.log(np.exp(row - top).sum()))
            expected /= rows
            loss = rm_loss(torch.from_numpy(logits), torch.from_numpy(labels)).item()
            assert loss == pytest.approx(expected, abs=1e-9)

    def test_mr_loss_oracle(self):
        """Test the per-spectrum mean squared error averaged over the batch"""
        rng = np.random.default_rng(2)
        for _ in range(1000):
            rows, bands = int(rng.integers(1, 9)), int(rng.integers(1, 65))
            x, x_hat = rng.normal(size=(rows, bands)), rng.normal(size=(rows, bands))
            expected = 0.0
            for r, s in zip(x, x_hat):
                expected += sum((a - b) ** 2 for a, b in zip(r, s)) / bands
            expected /= rows
            loss = mr_loss(torch.from_numpy(x), torch.from_numpy(x_hat)).item()
            assert loss == pytest.approx(expected, abs=1e-9)

    def test_mr_loss_identity(self):
        """Test a perfect reconstruction costs nothing"""
        x = torch.rand(4, 10)
        assert mr_loss(x, x.clone()).item() == 0.0

    def test_mr_loss_shape_mismatch(self):
        """Test differing shapes violate the contract"""
        with pytest.raises(ContractError):
            mr_loss(torch.rand(2, 5), torch.rand(2, 6))


class TestSslclLoss:
    """Test the symmetric consistency loss"""

    def test_oracle(self):
        """Test against a scalar re-implementation on random probability rows"""
        rng = np.random.default_rng(3)
        for _ in range(1000):
            rows, n = int(rng.integers(1, 9)), int(rng.integers(2, 9))
            z1, z2 = _softmax_rows(rng, rows, n), _softmax_rows(rng, rows, n)
            loss = sslcl_loss(torch.from_numpy(z1), torch.from_numpy(z2)).item()
            assert loss == pytest.approx(_brute_sslcl(z1.tolist(), z2.tolist()), abs=1e-9)

    def test_uniform_views(self):
        """Test uniform rows give zero"""
        z = torch.full((5, 4), 0.25, dtype=torch.float64)
        assert abs(sslcl_loss(z, z.clone()).item()) < 1e-9

    def test_identical_one_hot_batch(self):
        """Test a batch of one repeated one-hot row gives zero"""
        z = torch.zeros(6, 3, dtype=torch.float64)
        z[:, 1] = 1.0
        assert abs(sslcl_loss(z, z.clone()).item()) < 1e-9

    @pytest.mark.parametrize("n", [2, 4, 9, 16])
    def test_distinct_one_hots(self, n):
        """Test N distinct one-hot rows with identical views give -ln N"""
        z = torch.eye(n, dtype=torch.float64)
        assert sslcl_loss(z, z.clone()).item() == pytest.approx(-math.log(n), abs=1e-9)

    def test_symmetric(self):
        """Test swapping the views leaves the loss unchanged"""
        rng = np.random.default_rng(4)
        z1 = torch.from_numpy(_softmax_rows(rng, 5, 3))
        z2 = torch.from_numpy(_softmax_rows(rng, 5, 3))
        assert sslcl_loss(z1, z2).item() == pytest.approx(sslcl_loss(z2, z1).item(), abs=1e-12)

    def test_kl_plus_entropy_is_cross_entropy(self):
        """Test the divergence and sharpness terms add up to the mean cross-entropy"""
        rng = np.random.default_rng(7)
        for _ in range(1000):
            rows, n = int(rng.integers(1, 9)), int(rng.integers(2, 9))
            a = torch.from_numpy(_softmax_rows(rng, rows, n))
            b = torch.from_numpy(_softmax_rows(rng, rows, n))
            mean_entropy = -(a.mean(dim=0) * torch.log(a.mean(dim=0))).sum()
            cross_entropy = -(a * torch.log(b)).sum(dim=1).mean()
            assert (directional_consistency(a, b) + mean_entropy).item() == pytest.approx(
                cross_entropy.item(), abs=1e-9
            )

    def test_identical_views_lower_bound(self):
        """Test identical views never score below -ln N"""
        rng = np.random.default_rng(8)
        for _ in range(10_000):
            rows, n = int(rng.integers(1, 17)), int(rng.integers(2, 17))
            logits = rng.normal(scale=rng.uniform(0.1, 20.0), size=(rows, n))
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            z = torch.from_numpy(e / e.sum(axis=1, keepdims=True))
            assert sslcl_loss(z, z).item() >= -math.log(n) - 1e-7

    def test_rejects_non_probabilities(self):
        """Test rows that do not sum to one violate the contract"""
        with pytest.raises(ContractError):
            sslcl_loss(torch.full((2, 3), 0.5), torch.full((2, 3), 0.5))


class TestStageTotal:
    """Test loss aggregation"""

    def test_sum(self):
        """Test the total is the plain sum of the components"""
        total = stage_total({"fsl": torch.tensor(1.5), "rm": torch.tensor(0.25)})
        assert total.item() == pytest.approx(1.75)

    def test_gradient_is_sum_of_component_gradients(self):
        """Test the total's gradient equals the sum of the components' gradients"""
        rng = np.random.default_rng(9)
        w = torch.from_numpy(rng.normal(size=(4, 6))).requires_grad_(True)
        x = torch.from_numpy(rng.normal(size=(10, 4)))
        labels = torch.from_numpy(rng.integers(0, 6, size=10))

        def components():
            logits = x @ w
            return {"rm": rm_loss(logits, labels), "mr": mr_loss(logits, torch.zeros_like(logits))}

        (total_grad,) = torch.autograd.grad(stage_total(components()), w)
        parts = [torch.autograd.grad(value, w)[0] for value in components().values()]
        torch.testing.assert_close(total_grad, parts[0] + parts[1])

    def test_empty(self):
        """Test a stage without components violates the contract"""
        with pytest.raises(ContractError):
            stage_total({})
