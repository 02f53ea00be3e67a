import math
from fractions import Fraction

import numpy as np
import pytest

from tdseg.apm import (FrameCache, PhiLayer, add_merge, affinity, affinity_rows_csv, apm_merge,
                       attend, build_phis, count_macs, downsample_cache, effective_attention,
                       final_merge, propagate_step, query_key_macs, sta_merge)
from tdseg.gradcheck import finite_diff_check
from tdseg.subnet import QKVMaps
from tdseg.tensor import Parameter, ShapeError, Tensor, mac_ledger, maxpool2d


def rand_maps(rng, d_k, c, h, w, idx=0, requires_grad=False):
    mk = (lambda a, nm: Parameter(a, name=nm)) if requires_grad else (lambda a, nm: Tensor(a))
    return QKVMaps(mk(rng.normal(size=(d_k, h, w)), f"q{idx}"), mk(rng.normal(size=(d_k, h, w)), f"k{idx}"),
                   mk(rng.normal(size=(c, h, w)), f"v{idx}"), idx)


def random_phi(rng, c, name="phi"):
    phi = PhiLayer(name, c)
    phi.weight.data[...] = rng.normal(size=phi.weight.shape)
    phi.bias.data[...] = rng.normal(size=phi.bias.shape)
    return phi


def phi_numpy(phi, x):
    return np.einsum("oc,chw->ohw", phi.weight.data[:, :, 0, 0], x) + phi.bias.data[:, None, None]


# -- affinity -------------------------------------------------------------------

def test_affinity_zero_query_uniform():
    aff = affinity(Tensor(np.zeros((2, 3))), Tensor(np.random.default_rng(0).normal(size=(2, 4))))
    np.testing.assert_allclose(aff.weights.data, np.full((3, 4), 0.25))


def test_affinity_closed_form():
    aff = affinity(Tensor([[1.0]]), Tensor([[1.0, 0.0]]))
    e = math.e
    np.testing.assert_allclose(aff.weights.data, [[e / (e + 1), 1 / (e + 1)]], atol=1e-12)
    assert aff.scale == 1.0


def test_affinity_scales_by_root_dk():
    rng = np.random.default_rng(1)
    q, k = rng.normal(size=(4, 5)), rng.normal(size=(4, 6))
    logits = q.T @ k / 2.0
    ref = np.exp(logits - logits.max(1, keepdims=True))
    ref /= ref.sum(1, keepdims=True)
    np.testing.assert_allclose(affinity(Tensor(q), Tensor(k)).weights.data, ref, atol=1e-14)


def test_affinity_dk_mismatch():
    with pytest.raises(ShapeError, match="d_k"):
        affinity(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))


# -- STA -----------------------------------------------------------------------

def test_sta_no_history_and_zero_phi():
    rng = np.random.default_rng(0)
    cur = rand_maps(rng, 1, 2, 3, 3)
    assert sta_merge(cur, [], []) is cur.v
    hist = [rand_maps(rng, 1, 2, 3, 3, i) for i in range(3)]
    out = sta_merge(cur, hist, build_phis(2, 3))
    np.testing.assert_array_equal(out.data, cur.v.data)


def test_sta_brute_force_m2():
    """All 4x4 affinity entries enumerated by hand-style loops on 1x2x2 maps."""
    rng = np.random.default_rng(7)
    cur, prev = rand_maps(rng, 1, 1, 2, 2, 1), rand_maps(rng, 1, 1, 2, 2, 0)
    phi = random_phi(rng, 1)
    qs = cur.q.data.reshape(-1)
    ks = prev.k.data.reshape(-1)
    vs = prev.v.data.reshape(-1)
    expected = np.zeros(4)
    for i in range(4):
        scores = [math.exp(qs[i] * ks[j]) for j in range(4)]
        z = sum(scores)
        expected[i] = sum(scores[j] / z * vs[j] for j in range(4))
    expected = phi.weight.data[0, 0, 0, 0] * expected + phi.bias.data[0] + cur.v.data.reshape(-1)
    out = sta_merge(cur, [prev], [phi])
    np.testing.assert_allclose(out.data.reshape(-1), expected, atol=1e-12)


# -- downsampling --------------------------------------------------------------

def test_downsample_identity_and_window():
    rng = np.random.default_rng(0)
    maps = rand_maps(rng, 2, 3, 4, 4)
    c1 = downsample_cache(maps, 1)
    for a, b in ((c1.q_ds, maps.q), (c1.k_ds, maps.k), (c1.v_ds, maps.v)):
        np.testing.assert_array_equal(a.data, b.data)
    v = np.arange(1, 17, dtype=float).reshape(1, 4, 4)
    maps = QKVMaps(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 4, 4))), Tensor(v), 3)
    c2 = downsample_cache(maps, 2)
    np.testing.assert_array_equal(c2.v_ds.data[0], [[6, 8], [14, 16]])
    assert c2.stride == 2 and c2.frame_index == 3


def test_downsample_too_large():
    with pytest.raises(ShapeError):
        downsample_cache(rand_maps(np.random.default_rng(0), 1, 1, 4, 4), 5)


def test_downsample_avg_option():
    maps = rand_maps(np.random.default_rng(0), 1, 2, 4, 4)
    c = downsample_cache(maps, 2, mode="avg")
    np.testing.assert_allclose(c.v_ds.data[:, 0, 0], maps.v.data[:, :2, :2].mean(axis=(1, 2)))


# -- propagation ---------------------------------------------------------------

def _cache(rng, d_k, c, h, w, idx=0):
    m = rand_maps(rng, d_k, c, h, w, idx)
    return FrameCache(m.q, m.k, m.v, idx, 1)


def test_propagate_zero_phi_and_zero_history():
    rng = np.random.default_rng(0)
    cache = _cache(rng, 2, 3, 2, 2)
    out = propagate_step(cache, Tensor(rng.normal(size=(2, 2, 2))), Tensor(rng.normal(size=(3, 2, 2))),
                         PhiLayer("p", 3))
    np.testing.assert_array_equal(out.data, cache.v_ds.data)
    phi = random_phi(rng, 3)
    phi.bias.data[...] = 0
    out = propagate_step(cache, Tensor(rng.normal(size=(2, 2, 2))), Tensor(np.zeros((3, 2, 2))), phi)
    np.testing.assert_allclose(out.data, cache.v_ds.data, atol=1e-15)


def test_propagate_scalar_case():
    rng = np.random.default_rng(2)
    cache = _cache(rng, 1, 2, 1, 1)
    phi = random_phi(rng, 2)
    v_prev = np.array([0.3, -1.2]).reshape(2, 1, 1)
    out = propagate_step(cache, Tensor(rng.normal(size=(1, 1, 1))), Tensor(v_prev), phi)
    expected = phi.weight.data[:, :, 0, 0] @ v_prev[:, 0, 0] + phi.bias.data + cache.v_ds.data[:, 0, 0]
    np.testing.assert_allclose(out.data[:, 0, 0], expected, atol=1e-14)


def test_propagate_extent_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        propagate_step(_cache(rng, 1, 2, 2, 2), Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((2, 3, 3))),
                       PhiLayer("p", 2))


# -- final merge ---------------------------------------------------------------

def test_final_merge_zero_phi():
    rng = np.random.default_rng(0)
    cur = rand_maps(rng, 2, 3, 4, 4)
    out = final_merge(cur, Tensor(rng.normal(size=(3, 2, 2))), Tensor(rng.normal(size=(2, 2, 2))), PhiLayer("p", 3))
    np.testing.assert_array_equal(out.data, cur.v.data)


def test_final_merge_constant_chain():
    rng = np.random.default_rng(3)
    cur = rand_maps(rng, 2, 3, 4, 4)
    c = np.array([0.5, -2.0, 1.5])
    chain = np.broadcast_to(c[:, None, None], (3, 2, 2)).copy()
    phi = random_phi(rng, 3)
    out = final_merge(cur, Tensor(chain), Tensor(rng.normal(size=(2, 2, 2))), phi)
    expected = phi_numpy(phi, np.broadcast_to(c[:, None, None], (3, 4, 4))) + cur.v.data
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_final_merge_dk_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        final_merge(rand_maps(rng, 2, 3, 4, 4), Tensor(np.zeros((3, 2, 2))), Tensor(np.zeros((3, 2, 2))),
                    PhiLayer("p", 3))


@pytest.mark.parametrize("seed", range(20))
def test_apm_equals_sta_at_m2_n1(seed):
    rng = np.random.default_rng(seed)
    d_k, c, h, w = 2, 4, 3, 5
    cur, prev = rand_maps(rng, d_k, c, h, w, 1), rand_maps(rng, d_k, c, h, w, 0)
    phi = random_phi(rng, c)
    apm = apm_merge(cur, [downsample_cache(prev, 1)], [phi]).data
    sta = sta_merge(cur, [prev], [phi]).data
    assert np.max(np.abs(apm - sta)) <= 1e-9


# -- add baseline ----------------------------------------------------------------

def test_add_merge():
    rng = np.random.default_rng(0)
    cur = rand_maps(rng, 1, 2, 4, 4)
    assert add_merge(cur, []) is cur.v
    np.testing.assert_allclose(add_merge(cur, [cur]).data, 2 * cur.v.data)
    small = downsample_cache(cur, 2)
    np.testing.assert_allclose(add_merge(QKVMaps(small.q_ds, small.k_ds, small.v_ds), [cur]).data,
                               small.v_ds.data + maxpool2d(cur.v, 2).data)


# -- invariants ------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(200))
def test_row_stochastic_and_convex_bound(seed):
    rng = np.random.default_rng(seed)
    d_k = int(rng.integers(1, 4))
    c = int(rng.integers(1, 4))
    A, B = int(rng.integers(1, 20)), int(rng.integers(1, 20))
    q = rng.normal(scale=rng.uniform(0.1, 10), size=(d_k, A))
    k = rng.normal(scale=rng.uniform(0.1, 10), size=(d_k, B))
    v = rng.normal(size=(c, 1, B))
    aff = affinity(Tensor(q), Tensor(k))
    W = aff.weights.data
    assert np.all(W >= 0) and np.all(W <= 1)
    assert np.max(np.abs(W.sum(axis=1) - 1)) <= 1e-9
    out = attend(aff, Tensor(v), (1, A)).data.reshape(c, A)
    lo, hi = v.min(axis=(1, 2)), v.max(axis=(1, 2))
    assert np.all(out >= lo[:, None] - 1e-9) and np.all(out <= hi[:, None] + 1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_apm_content_addressing_permutation_invariance(seed):
    """Permuting each history frame's pooled pixels (q, k, v together) leaves APM unchanged; Add changes."""
    rng = np.random.default_rng(seed)
    d_k, c, H, W, n = 2, 3, 8, 8, 2
    cur = rand_maps(rng, d_k, c, H, W, 3)
    hist = [downsample_cache(rand_maps(rng, d_k, c, H, W, i), n) for i in range(3)]
    phis = [random_phi(rng, c, f"phi{i}") for i in range(3)]

    def permuted(cache):
        h, w = cache.v_ds.shape[1:]
        perm = rng.permutation(h * w)
        f = lambda t: Tensor(t.data.reshape(t.shape[0], -1)[:, perm].reshape(t.shape))
        return FrameCache(f(cache.q_ds), f(cache.k_ds), f(cache.v_ds), cache.frame_index, n)

    base = apm_merge(cur, hist, phis).data
    perm_hist = [permuted(h) for h in hist]
    assert np.max(np.abs(apm_merge(cur, perm_hist, phis).data - base)) <= 1e-6
    # history at full res for Add: permuting pixels moves content and changes the sum
    full = rand_maps(rng, d_k, c, H, W, 0)
    perm = rng.permutation(H * W)
    full_p = QKVMaps(full.q, full.k, Tensor(full.v.data.reshape(c, -1)[:, perm].reshape(c, H, W)))
    assert np.max(np.abs(add_merge(cur, [full]).data - add_merge(cur, [full_p]).data)) > 1e-3


def test_gradient_through_two_frame_pipeline():
    rng = np.random.default_rng(11)
    d_k, c = 1, 8
    cur = rand_maps(rng, d_k, c, 4, 4, 1, requires_grad=True)
    prev = rand_maps(rng, d_k, c, 4, 4, 0, requires_grad=True)
    phi = random_phi(rng, c)
    phi.weight.name, phi.bias.name = "phi.w", "phi.b"
    proj = rng.normal(size=(c, 4, 4))

    def f():
        cache = downsample_cache(prev, 2)
        out = apm_merge(cur, [cache], [phi])
        return (out * Tensor(proj)).sum()

    params = [cur.q, cur.k, cur.v, prev.k, prev.v, phi.weight, phi.bias]
    rep = finite_diff_check(f, params, h=1e-5, tol=1e-5)
    assert rep.passed, rep


# -- MAC ledger ------------------------------------------------------------------

def test_count_macs_sta_example():
    led = count_macs(m=2, n=1, H=8, W=8, d_k=4, C=8, method="sta")
    assert led["sta1/qk"] == 16384
    assert query_key_macs(led) == 16384


def test_count_macs_apm_example():
    led = count_macs(m=4, n=2, H=8, W=8, d_k=4, C=8, method="apm")
    assert led["final/qk"] == 64 * 16 * 4 == 4096
    assert led["prop1/qk"] == led["prop2/qk"] == 1024
    assert query_key_macs(led) == 6144


def test_count_macs_stride_doubling_quarters_final_site():
    a = count_macs(4, 2, 16, 16, 2, 16)["final/qk"]
    b = count_macs(4, 4, 16, 16, 2, 16)["final/qk"]
    assert a == 4 * b


@pytest.mark.parametrize("method,m,n", [("apm", 4, 2), ("apm", 4, 1), ("apm", 3, 4), ("sta", 4, 1),
                                        ("sta", 2, 1), ("apm", 2, 8), ("add", 4, 1)])
def test_count_macs_matches_instrumented(method, m, n):
    rng = np.random.default_rng(0)
    d_k, c, H, W = 2, 8, 8, 8
    cur = rand_maps(rng, d_k, c, H, W, m - 1)
    hist = [downsample_cache(rand_maps(rng, d_k, c, H, W, i), n if method == "apm" else 1, keep_full=True)
            for i in range(m - 1)]
    phis = build_phis(c, m - 1)
    from tdseg.apm import aggregate
    with mac_ledger() as led:
        aggregate(method, cur, hist, phis)
    assert dict(led) == count_macs(m, n, H, W, d_k, c, method)


def test_apm_sta_ratio_exact():
    m, H, W, d_k, C = 4, 8, 8, 2, 16
    sta = query_key_macs(count_macs(m, 1, H, W, d_k, C, "sta"))
    for n in (1, 2, 4, 8):
        apm = query_key_macs(count_macs(m, n, H, W, d_k, C, "apm"))
        expected = (Fraction(m - 2, n ** 4) + Fraction(1, n ** 2)) / (m - 1)
        assert Fraction(apm, sta) == expected


# -- attention dump --------------------------------------------------------------

def test_effective_attention_rows_stochastic_and_csv():
    rng = np.random.default_rng(4)
    cur = rand_maps(rng, 2, 3, 8, 8, 3)
    hist = [downsample_cache(rand_maps(rng, 2, 3, 8, 8, i), 2) for i in range(3)]
    mats = effective_attention(cur, hist)
    assert len(mats) == 3
    for mat in mats:
        np.testing.assert_allclose(mat.sum(axis=1), 1.0, atol=1e-12)
    text = affinity_rows_csv(cur, hist, 2, 5)
    lines = text.strip().split("\n")
    assert lines[0] == "query_y,query_x,key_frame,key_y,key_x,weight"
    assert len(lines) == 1 + 3 * 16
    per_frame = {}
    for line in lines[1:]:
        qy, qx, f, ky, kx, wt = line.split(",")
        per_frame[int(f)] = per_frame.get(int(f), 0.0) + float(wt)
    assert set(per_frame) == {0, 1, 2}
    for total in per_frame.values():
        assert abs(total - 1) <= 1e-6
    with pytest.raises(IndexError):
        affinity_rows_csv(cur, hist, 8, 0)
