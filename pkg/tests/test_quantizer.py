import numpy as np
import pytest

from l2gnet.autodiff import Parameter, Rng, Tensor
from l2gnet.quantizer import Codebook, codebook_usage, quant_loss, quantize


def make_codebook(rng, K=5, dim=4):
    cb = Codebook.create(K, dim, rng)
    cb.E.data[...] = rng.normal((K, dim))
    return cb


def test_exact_match_selects_code_with_zero_loss():
    cb = make_codebook(Rng(0))
    z = Tensor(cb.E.data[3:4].copy())
    res = quantize(z, cb)
    assert res.indices.tolist() == [3]
    np.testing.assert_array_equal(res.z_dis.data, cb.E.data[3:4])
    assert float(res.quant_loss.data) == 0.0


def test_tie_breaks_to_lower_index():
    cb = Codebook.create(4, 2, Rng(1))
    cb.E.data[...] = [[1.0, 0.0], [-1.0, 0.0], [5.0, 5.0], [2.0, 0.0]]
    # [1,0] and [-1,0] are exactly equidistant from the origin
    res = quantize(Tensor([[0.0, 0.0]]), cb)
    assert res.indices.tolist() == [0]


@pytest.mark.parametrize("seed", range(10))
def test_indices_match_exhaustive_oracle(seed):
    rng = Rng(seed + 50)
    cb = make_codebook(rng, K=5, dim=4)
    z = rng.normal((7, 4))
    res = quantize(Tensor(z), cb)
    for i in range(7):
        dists = [np.sum((z[i] - cb.E.data[k]) ** 2) for k in range(5)]
        assert res.indices[i] == int(np.argmin(dists))


def test_dim_mismatch_and_empty_input():
    cb = make_codebook(Rng(2))
    with pytest.raises(ValueError):
        quantize(Tensor(np.ones((3, 7))), cb)
    with pytest.raises(ValueError):
        quantize(Tensor(np.ones((0, 4))), cb)


def test_quant_loss_zero_when_on_codes():
    cb = make_codebook(Rng(3))
    z = Tensor(cb.E.data[[1, 2]].copy())
    res = quantize(z, cb)
    assert float(res.quant_loss.data) == 0.0


def test_quant_loss_pythagorean():
    cb = Codebook.create(2, 2, Rng(4))
    cb.E.data[...] = [[3.0, 4.0], [100.0, 100.0]]
    loss = quant_loss(Tensor([[0.0, 0.0]]), cb, np.array([0]), beta=0.0)
    assert abs(float(loss.data) - 25.0) < 1e-12


def test_quant_loss_matches_loop_oracle():
    rng = Rng(5)
    cb = make_codebook(rng, K=6, dim=3)
    z = rng.normal((8, 3))
    res = quantize(Tensor(z), cb, beta=0.25)
    expect = 0.0
    for i in range(8):
        e = cb.E.data[res.indices[i]]
        expect += np.sum((z[i] - e) ** 2) * (1 + 0.25) / 8
    assert abs(float(res.quant_loss.data) - expect) < 1e-12


def test_straight_through_contract():
    rng = Rng(6)
    cb = make_codebook(rng, K=4, dim=3)
    z = Parameter(rng.normal((5, 3)), "z")
    c = rng.normal((5, 3))

    # L = <c, z_dis>: dL/dz_con must equal c exactly (identity pass-through)
    z.zero_grad()
    res = quantize(z, cb)
    (res.z_dis * Tensor(c)).sum().backward()
    np.testing.assert_array_equal(z.grad, c)


def test_codebook_gets_gradient_only_via_loss():
    rng = Rng(7)
    cb = make_codebook(rng, K=4, dim=3)
    z = Parameter(rng.normal((5, 3)), "z")
    cb.E.zero_grad()
    res = quantize(z, cb)
    (res.z_dis.sum() * 1.0).backward()
    np.testing.assert_array_equal(cb.E.grad, np.zeros_like(cb.E.data))
    cb.E.zero_grad()
    res.quant_loss.backward()
    assert np.any(cb.E.grad != 0)


def test_idempotence_on_codebook_rows():
    rng = Rng(8)
    cb = make_codebook(rng, K=6, dim=4)
    z = Tensor(cb.E.data.copy())
    res = quantize(z, cb)
    np.testing.assert_array_equal(res.z_dis.data, cb.E.data)
    assert res.indices.tolist() == list(range(6))


@pytest.mark.parametrize("seed", range(5))
def test_quant_loss_nonnegative(seed):
    rng = Rng(seed + 80)
    cb = make_codebook(rng)
    res = quantize(Tensor(rng.normal((6, 4))), cb,
                   beta=float(rng.uniform(0, 2, None)))
    assert float(res.quant_loss.data) >= 0.0


def test_literal_loss_mode():
    rng = Rng(9)
    cb = make_codebook(rng)
    z = rng.normal((3, 4))
    res = quantize(Tensor(z), cb, literal_loss=True)
    expect = np.mean([np.sum((z[i] - cb.E.data[res.indices[i]]) ** 2)
                      for i in range(3)])
    assert abs(float(res.quant_loss.data) - expect) < 1e-12


def test_usage_histogram():
    assert codebook_usage(np.zeros(7, dtype=int), 4).tolist() == [7, 0, 0, 0]
    assert codebook_usage(np.array([], dtype=int), 3).tolist() == [0, 0, 0]
    rng = Rng(10)
    idx = rng.integers(0, 6, 100)
    hist = codebook_usage(idx, 6)
    assert hist.sum() == 100
    for k in range(6):
        assert hist[k] == int(np.sum(idx == k))
    with pytest.raises(ValueError):
        codebook_usage(np.array([6]), 6)


def test_kmeans_warmstart_recovers_distinct_points():
    rng = Rng(11)
    pts = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    batch = np.repeat(pts, 5, axis=0)
    cb = Codebook.create(3, 2, rng)
    cb.kmeans_warmstart(batch, rng)
    got = sorted(cb.E.data.tolist())
    assert got == sorted(pts.tolist())
