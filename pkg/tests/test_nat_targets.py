import itertools

import numpy as np
import pytest
import torch

from docpretext.errors import DomainError
from docpretext.nat_targets import TargetBank, assign_batch, nat_loss, reassign, sample_targets


def brute_force_best(features, targets):
    m = len(features)
    sim = features @ targets.T
    return max(sum(sim[i, p[i]] for i in range(m)) for p in itertools.permutations(range(m)))


def unit_rows(rng, m, d):
    x = rng.standard_normal((m, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_rows_are_unit():
    bank = sample_targets(500, 7, seed=1)
    np.testing.assert_allclose(np.linalg.norm(bank.targets, axis=1), 1.0, atol=1e-9)
    assert bank.assignment == {str(i): i for i in range(500)}


def test_one_dimensional_targets_are_signs():
    bank = sample_targets(200, 1, seed=2)
    assert set(np.unique(bank.targets)) <= {-1.0, 1.0}


def test_coordinate_means_near_zero():
    n = 10_000
    bank = sample_targets(n, 16, seed=3)
    assert np.all(np.abs(bank.targets.mean(axis=0)) < 3 / np.sqrt(n))


def test_assign_single():
    assert assign_batch(np.ones((1, 3)) / np.sqrt(3), np.ones((1, 3)) / np.sqrt(3)).tolist() == [0]


def test_assign_recovers_permutation():
    rng = np.random.default_rng(0)
    targets = unit_rows(rng, 3, 5)
    pi = np.array([2, 0, 1])
    features = targets[pi]
    sigma = assign_batch(features, targets)
    assert sigma.tolist() == pi.tolist()
    assert np.sum(features * targets[sigma]) == pytest.approx(3.0)


def test_assign_matches_brute_force():
    rng = np.random.default_rng(1)
    f, t = unit_rows(rng, 6, 4), unit_rows(rng, 6, 4)
    sigma = assign_batch(f, t)
    assert sorted(sigma) == list(range(6))
    assert np.sum(f * t[sigma]) == pytest.approx(brute_force_best(f, t), abs=1e-12)


def test_assign_errors():
    with pytest.raises(DomainError):
        assign_batch(np.ones((3, 2)), np.ones((3, 4)))
    with pytest.raises(DomainError):
        assign_batch(np.ones((5, 2)), np.ones((5, 2)), max_batch=4)


def test_loss_examples():
    rng = np.random.default_rng(2)
    t = torch.from_numpy(unit_rows(rng, 4, 3))
    assert nat_loss(t, t).item() == pytest.approx(-1.0)
    assert nat_loss(-t, t).item() == pytest.approx(1.0)
    e1 = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    e2 = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    assert nat_loss(e1, e2).item() == pytest.approx(0.0)


def test_loss_rejects_unnormalized():
    with pytest.raises(DomainError):
        nat_loss(torch.ones(2, 3), torch.ones(2, 3))


def test_loss_bounded():
    rng = np.random.default_rng(3)
    for _ in range(50):
        v = nat_loss(unit_rows(rng, 5, 3), unit_rows(rng, 5, 3)).item()
        assert -1 <= v <= 1


def test_reassignment_never_increases_epoch_loss():
    rng = np.random.default_rng(4)
    n, d = 40, 6
    features = unit_rows(rng, n, d)
    bank = sample_targets(n, d, seed=5)
    ids = [str(i) for i in range(n)]

    def epoch_loss():
        rows = [bank.row_of(k) for k in ids]
        return nat_loss(features, bank.targets[rows]).item()

    prev = epoch_loss()
    for _ in range(30):
        batch = rng.choice(n, 8, replace=False)
        reassign(bank, [ids[i] for i in batch], features[batch])
        cur = epoch_loss()
        assert cur <= prev + 1e-12
        prev = cur
    assert sorted(bank.assignment.values()) == list(range(n))


def test_json_roundtrip(tmp_path):
    bank = sample_targets(5, 3, seed=9, ids=["a", "b", "c", "d", "e"])
    bank.assignment["a"], bank.assignment["b"] = 1, 0
    bank.save(tmp_path / "bank.json")
    back = TargetBank.load(tmp_path / "bank.json")
    assert np.array_equal(back.targets, bank.targets)
    assert back.assignment == bank.assignment and back.seed == 9
    assert back.to_json() == bank.to_json()
