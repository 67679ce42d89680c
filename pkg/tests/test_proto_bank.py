import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoclus.errors import ConvergenceWarning, FormatError, LabelError, ShapeError
from protoclus.numerics import Rng
from protoclus.proto_bank import (BatchAssignments, PrototypeBank, assign_batch, init_bank,
                                  load_bank, quiet_assign, save_bank, update_bank)

from conftest import unit_cols

pytestmark = pytest.mark.filterwarnings("ignore::protoclus.errors.ConvergenceWarning")


def clustered_features(seed, C, K, D=8, per=10, noise=0.05):
    """K tight unit-norm clusters per primitive, with their normalized means."""
    r = Rng(seed)
    F, labels, means = [], [], []
    for c in range(C):
        basis = np.linalg.qr(r.standard_normal((D, D)))[0]
        for k in range(K):
            f = basis[:, k:k + 1] + noise * r.standard_normal((D, per))
            f /= np.linalg.norm(f, axis=0)
            F.append(f)
            labels += [c] * per
            m = f.mean(axis=1)
            means.append(m / np.linalg.norm(m))
    return np.hstack(F), np.array(labels), np.array(means).reshape(C, K, D)


# -- init -----------------------------------------------------------------------

def test_init_deterministic():
    a = init_bank(3, 2, 4, Rng(5))
    b = init_bank(3, 2, 4, Rng(5))
    np.testing.assert_array_equal(a.P, b.P)


def test_init_shapes_and_norms():
    bank = init_bank(4, 1, 6, Rng(0), branch="object")
    assert bank.as_tensor().shape == (4, 1, 6)
    assert np.abs(np.linalg.norm(bank.P, axis=1) - 1).max() < 1e-9
    assert bank.branch == "object" and bank.uniform_k == 1


def test_init_per_primitive_counts():
    bank = init_bank(3, [1, 3, 2], 4, Rng(0))
    assert [bank.prototypes(c).shape[0] for c in range(3)] == [1, 3, 2]
    assert bank.uniform_k is None
    with pytest.raises(ShapeError):
        bank.as_tensor()


@pytest.mark.parametrize("kwargs", [dict(C=0, K=1, D=1), dict(C=1, K=0, D=1), dict(C=1, K=1, D=0)])
def test_init_rejects_empty(kwargs):
    with pytest.raises(ValueError):
        init_bank(rng=Rng(0), **kwargs)


def test_bank_validation():
    with pytest.raises(ValueError, match="branch"):
        PrototypeBank("colour", np.eye(2), [2])
    with pytest.raises(ShapeError):
        PrototypeBank("attribute", np.eye(2), [3])
    with pytest.raises(ValueError, match="mu"):
        PrototypeBank("attribute", np.eye(2), [2], mu=1.5)


# -- assignment ---------------------------------------------------------------------

def test_single_sample_single_prototype():
    bank = init_bank(2, 1, 3, Rng(0))
    a = assign_batch(bank, unit_cols(Rng(1), 3, 1), [1])
    assert a.prototype.tolist() == [0] and a.positive.tolist() == [1]


def test_identical_columns_spread_uniformly():
    K = 3
    bank = init_bank(1, K, 4, Rng(2))
    F = np.repeat(unit_cols(Rng(3), 4, 1), 2 * K, axis=1)
    a = assign_batch(bank, F, np.zeros(2 * K, dtype=int))
    idx, plan = a.plans[0]
    # identical columns: every column is the same mixture, rows get 2 each
    np.testing.assert_allclose(plan.L, plan.L[:, :1].repeat(2 * K, axis=1), atol=1e-12)
    np.testing.assert_allclose(plan.L.sum(axis=1), 2.0, atol=1e-6)
    assert len(set(a.prototype.tolist())) == 1


def test_mixed_batch_feasibility():
    bank = init_bank(3, 2, 5, Rng(4))
    labels = np.repeat(np.arange(3), 8)
    Rng(5).shuffle(labels)
    a = assign_batch(bank, unit_cols(Rng(6), 5, 24), labels)
    assert a.complete
    assert np.all(a.primitive == labels)
    for c, (idx, plan) in a.plans.items():
        assert np.all(labels[idx] == c)
        cols = [sum(plan.L[k, j] for k in range(2)) for j in range(len(idx))]
        rows = [sum(plan.L[k, j] for j in range(len(idx))) for k in range(2)]
        assert max(abs(x - 1) for x in cols) < 1e-6
        assert max(abs(x - 4) for x in rows) < 1e-6
        np.testing.assert_array_equal(a.positive[idx], bank.offsets[c] + plan.labels)


def test_absent_primitive_untouched_and_fewer_samples_than_k():
    bank = init_bank(3, 4, 5, Rng(7))
    a = assign_batch(bank, unit_cols(Rng(8), 5, 2), [0, 0])
    assert set(a.plans) == {0}
    assert np.all(a.positive[:2] < 4)


def test_per_primitive_k_list_respected():
    bank = init_bank(3, [1, 2, 5], 4, Rng(9))
    labels = np.repeat(np.arange(3), 10)
    a = assign_batch(bank, unit_cols(Rng(10), 4, 30), labels)
    for c, k in enumerate([1, 2, 5]):
        idx, plan = a.plans[c]
        assert plan.L.shape == (k, 10)
        assert np.all(a.prototype[idx] < k)
        assert np.all((a.positive[idx] >= bank.offsets[c]) & (a.positive[idx] < bank.offsets[c] + k))


def test_assign_errors():
    bank = init_bank(2, 2, 3, Rng(0))
    with pytest.raises(LabelError):
        assign_batch(bank, unit_cols(Rng(1), 3, 2), [0, 2])
    with pytest.raises(ShapeError):
        assign_batch(bank, unit_cols(Rng(1), 4, 2), [0, 1])
    with pytest.raises(ValueError, match="strategy"):
        assign_batch(bank, unit_cols(Rng(1), 3, 2), [0, 1], strategy="kmeans")


def test_cosine_strategy_is_nearest_prototype():
    bank = init_bank(1, 3, 4, Rng(11))
    F = unit_cols(Rng(12), 4, 9)
    a = assign_batch(bank, F, np.zeros(9, dtype=int), strategy="cosine")
    np.testing.assert_array_equal(a.prototype, np.argmax(bank.P @ F, axis=0))


def test_classical_ot_ignores_kappa():
    bank = init_bank(1, 3, 4, Rng(13))
    F = unit_cols(Rng(14), 4, 9)
    lab = np.zeros(9, dtype=int)
    a = assign_batch(bank, F, lab, kappa=5.0, strategy="classical_ot")
    b = assign_batch(bank, F, lab, kappa=0.0)
    np.testing.assert_array_equal(a.plans[0][1].L, b.plans[0][1].L)


def test_quiet_assign_counts_warnings():
    bank = init_bank(1, 4, 4, Rng(0))
    F = unit_cols(Rng(1), 4, 40)
    _, n = quiet_assign(bank, F, np.zeros(40, dtype=int), kappa=50.0, max_outer=1)
    assert n >= 1
    with warnings.catch_warnings():
        warnings.simplefilter("error", ConvergenceWarning)
        quiet_assign(bank, F, np.zeros(40, dtype=int), kappa=50.0, max_outer=1)


# -- momentum update ---------------------------------------------------------------

def test_mu_one_bit_identical():
    bank = init_bank(2, 3, 4, Rng(0), mu=1.0)
    F = unit_cols(Rng(1), 4, 12)
    a = assign_batch(bank, F, np.repeat([0, 1], 6))
    new = update_bank(bank, F, a)
    assert new.P.tobytes() == bank.P.tobytes()
    assert new is not bank


def test_mu_zero_normalized_means():
    bank = init_bank(2, 2, 4, Rng(2), mu=0.0)
    F = unit_cols(Rng(3), 4, 8)
    a = assign_batch(bank, F, np.repeat([0, 1], 4))
    new = update_bank(bank, F, a)
    for row in np.unique(a.positive):
        cols = [j for j in range(8) if a.positive[j] == row]
        mean = [sum(F[d, j] for j in cols) / len(cols) for d in range(4)]
        norm = sum(x * x for x in mean) ** 0.5
        np.testing.assert_allclose(new.P[row], np.array(mean) / norm, rtol=0, atol=1e-15)


def test_momentum_two_sample_cluster():
    mu = 0.99
    p = np.array([1.0, 0.0, 0.0])
    f1 = np.array([0.0, 1.0, 0.0])
    f2 = np.array([0.0, 0.0, 1.0])
    bank = PrototypeBank("attribute", p[None, :], [1], mu=mu)
    a = BatchAssignments(np.zeros(2, int), np.zeros(2, int), np.zeros(2, int))
    new = update_bank(bank, np.stack([f1, f2], axis=1), a)
    # oracle: mean (0, .5, .5) normalizes to (0, s, s); blend (.99, .01 s, .01 s) then renormalize
    s = 2 ** -0.5
    blend = np.array([mu, (1 - mu) * s, (1 - mu) * s])
    np.testing.assert_allclose(new.P[0], blend / np.linalg.norm(blend), atol=1e-15)


def test_unassigned_prototypes_unchanged():
    bank = init_bank(3, 2, 4, Rng(4), mu=0.5)
    F = unit_cols(Rng(5), 4, 4)
    a = assign_batch(bank, F, [1, 1, 1, 1])
    new = update_bank(bank, F, a)
    hit = set(a.positive.tolist())
    for row in range(6):
        if row not in hit:
            assert new.P[row].tobytes() == bank.P[row].tobytes()
    assert np.abs(np.linalg.norm(new.P, axis=1) - 1).max() < 1e-9


@given(st.floats(0.0, 1.0), st.integers(0, 10 ** 6))
@settings(max_examples=25, deadline=None)
def test_update_keeps_unit_norm(mu, seed):
    bank = init_bank(2, 3, 5, Rng(seed), mu=mu)
    F = unit_cols(Rng(seed + 1), 5, 10)
    new = update_bank(bank, F, assign_batch(bank, F, np.repeat([0, 1], 5)))
    assert np.abs(np.linalg.norm(new.P, axis=1) - 1).max() < 1e-9


def test_convergence_toy():
    C, K = 2, 3
    F, labels, means = clustered_features(21, C, K)
    bank = init_bank(C, K, F.shape[0], Rng(22), mu=0.9)
    for _ in range(100):
        bank = update_bank(bank, F, assign_batch(bank, F, labels))
    for c in range(C):
        dist = 1.0 - bank.prototypes(c) @ means[c].T
        nearest = dist.argmin(axis=1)
        assert sorted(nearest.tolist()) == list(range(K))
        assert dist.min(axis=1).max() < 0.01


# -- checkpoint -----------------------------------------------------------------------

@pytest.mark.parametrize("K", [3, [1, 4, 2]])
def test_checkpoint_round_trip(tmp_path, K):
    bank = init_bank(3, K, 5, Rng(0), branch="object", mu=0.97)
    path = tmp_path / "bank.pbnk"
    save_bank(bank, path)
    back = load_bank(path, branch="object")
    assert back.P.tobytes() == bank.P.tobytes()
    np.testing.assert_array_equal(back.sizes, bank.sizes)
    assert back.mu == bank.mu


def test_checkpoint_layout(tmp_path):
    bank = init_bank(2, 2, 3, Rng(0), mu=0.5)
    path = tmp_path / "b.pbnk"
    save_bank(bank, path)
    raw = path.read_bytes()
    assert struct.unpack_from("<4sIIIId", raw) == (b"PBNK", 1, 2, 2, 3, 0.5)
    assert np.frombuffer(raw, "<f8", offset=28).tobytes() == bank.P.tobytes()


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    (lambda b: b[:-8], "expected"),
    (lambda b: b[:10], "too short"),
])
def test_checkpoint_corruption(tmp_path, mutate, match):
    path = tmp_path / "b.pbnk"
    save_bank(init_bank(2, 2, 3, Rng(0)), path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError, match=match):
        load_bank(path)
