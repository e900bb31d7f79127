"""Unit tests for the reverse-mode engine: op-level oracles, gradient
checks against the independent finite-difference oracle, and invariants."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as hst

import thermofuse.autodiff as ad


def gradcheck(f, leaves, tol=1e-4):
    """Analytic vs central finite-difference gradients on all leaves."""
    loss = f()
    ad.backward(loss)
    analytic = [leaf.grad.copy() for leaf in leaves]
    for leaf in leaves:
        leaf.grad = None
    numeric = ad.finite_difference_grads(f, leaves)
    for a, n in zip(analytic, numeric):
        assert ad.max_relative_error(a, n) <= tol


def leaf(shape, rng, scale=1.0):
    return ad.Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

class TestDense:
    def test_identity(self):
        y = ad.dense(ad.Tensor([[1.0, 2.0]]), ad.Tensor(np.eye(2)),
                     ad.Tensor([0.0, 0.0]))
        assert np.array_equal(y.data, [[1.0, 2.0]])

    def test_identity_plus_bias(self):
        y = ad.dense(ad.Tensor([[1.0, 2.0]]), ad.Tensor(np.eye(2)),
                     ad.Tensor([3.0, 4.0]))
        assert np.array_equal(y.data, [[4.0, 6.0]])

    def test_hand_matmul(self):
        y = ad.dense(ad.Tensor([[1.0, 2.0], [3.0, 4.0]]),
                     ad.Tensor([[1.0, 2.0], [3.0, 4.0]]),
                     ad.Tensor([0.0, 0.0]))
        assert np.array_equal(y.data, [[7.0, 10.0], [15.0, 22.0]])

    def test_shape_mismatch_reports_dimensions(self):
        with pytest.raises(ad.ShapeError, match=r"\(1, 3\).*\(2, 2\)"):
            ad.dense(ad.Tensor(np.ones((1, 3))), ad.Tensor(np.ones((2, 2))),
                     ad.Tensor(np.ones(2)))

    def test_gradcheck(self):
        rng = np.random.default_rng(0)
        x, W, b = leaf((3, 4), rng), leaf((4, 2), rng), leaf((2,), rng)
        gradcheck(lambda: ad.sum_all(ad.dense(x, W, b)), [x, W, b])


# ---------------------------------------------------------------------------
# conv3d
# ---------------------------------------------------------------------------

def conv3d_loops(x, k, stride, padding):
    """Brute-force five-nested-loop oracle (batched, channels first)."""
    sd, sh, sw = stride
    pd, ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    n, cin, d, h, w = xp.shape
    cout, _, kd, kh, kw = k.shape
    do, ho, wo = (d - kd) // sd + 1, (h - kh) // sh + 1, (w - kw) // sw + 1
    y = np.zeros((n, cout, do, ho, wo))
    for b in range(n):
        for o in range(cout):
            for zd in range(do):
                for zh in range(ho):
                    for zw in range(wo):
                        patch = xp[b, :, zd * sd:zd * sd + kd,
                                   zh * sh:zh * sh + kh, zw * sw:zw * sw + kw]
                        y[b, o, zd, zh, zw] = np.sum(patch * k[o])
    return y


class TestConv3d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 4, 5, 3))
        k = np.ones((1, 1, 1, 1, 1))
        y = ad.conv3d(ad.Tensor(x), ad.Tensor(k))
        assert np.allclose(y.data, x)

    def test_cube_of_ones(self):
        x = np.ones((1, 2, 2, 2))
        k = np.ones((1, 1, 2, 2, 2))
        y = ad.conv3d(ad.Tensor(x), ad.Tensor(k))
        assert y.data.shape == (1, 1, 1, 1)
        assert y.data.reshape(-1)[0] == 8.0

    def test_zero_kernel(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 5, 6, 4))
        y = ad.conv3d(ad.Tensor(x), ad.Tensor(np.zeros((3, 2, 3, 3, 3))),
                      padding=1)
        assert y.data.shape == (3, 5, 6, 4)
        assert np.all(y.data == 0.0)

    def test_kernel_too_large_rejected(self):
        with pytest.raises(ad.ShapeError, match="larger"):
            ad.conv3d(ad.Tensor(np.ones((1, 2, 2, 2))),
                      ad.Tensor(np.ones((1, 1, 5, 5, 5))))

    @pytest.mark.parametrize("stride,padding", [
        ((1, 1, 1), (0, 0, 0)), ((2, 1, 1), (1, 0, 1)),
        ((2, 2, 1), (1, 1, 1)), ((3, 2, 1), (0, 1, 2)),
    ])
    def test_matches_loop_oracle(self, stride, padding):
        rng = np.random.default_rng(hash((stride, padding)) % 2**32)
        x = rng.standard_normal((2, 3, 6, 7, 5))
        k = rng.standard_normal((4, 3, 3, 3, 3))
        y = ad.conv3d(ad.Tensor(x), ad.Tensor(k), stride=stride,
                      padding=padding)
        assert np.max(np.abs(y.data - conv3d_loops(x, k, stride, padding))) <= 1e-6

    def test_unbatched_input(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 4, 5, 3))
        k = rng.standard_normal((3, 2, 3, 3, 3))
        y = ad.conv3d(ad.Tensor(x), ad.Tensor(k), padding=1)
        yb = ad.conv3d(ad.Tensor(x[None]), ad.Tensor(k), padding=1)
        assert np.array_equal(y.data, yb.data[0])

    @pytest.mark.parametrize("stride,padding", [
        ((1, 1, 1), (1, 1, 1)), ((2, 2, 1), (1, 1, 1)), ((3, 2, 1), (0, 1, 2)),
    ])
    def test_gradcheck(self, stride, padding):
        rng = np.random.default_rng(4)
        x = leaf((2, 2, 6, 7, 5), rng)
        k = leaf((3, 2, 3, 3, 3), rng, scale=0.3)
        gradcheck(lambda: ad.mse(
            ad.conv3d(x, k, stride=stride, padding=padding),
            ad.Tensor(np.zeros(ad.conv3d(x, k, stride=stride,
                                         padding=padding).shape))), [x, k])


# ---------------------------------------------------------------------------
# relu / flatten / concat / structural ops
# ---------------------------------------------------------------------------

class TestStructural:
    def test_relu_sign_cases(self):
        y = ad.relu(ad.Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(y.data, [0.0, 0.0, 2.0])

    def test_flatten_row_major(self):
        labeled = np.arange(18 * 35 * 7, dtype=np.float64).reshape(18, 35, 7)
        y = ad.flatten(ad.Tensor(labeled))
        assert y.shape == (4410,)
        # row-major: element (i, j, k) lands at i*35*7 + j*7 + k
        assert y.data[2 * 35 * 7 + 3 * 7 + 4] == labeled[2, 3, 4]

    def test_concat_order(self):
        y = ad.concat(ad.Tensor([1.0, 2.0]), ad.Tensor([3.0]), axis=0)
        assert np.array_equal(y.data, [1.0, 2.0, 3.0])

    def test_concat_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.concat(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((3, 4))),
                      axis=1)

    def test_gradchecks(self):
        rng = np.random.default_rng(5)
        x = leaf((3, 4), rng)
        y = leaf((3, 2), rng)
        gradcheck(lambda: ad.sum_all(ad.relu(ad.concat(x, y, axis=1))), [x, y])
        z = leaf((2, 3, 4), rng)
        gradcheck(lambda: ad.sum_all(ad.mul(ad.flatten(z, start_axis=1),
                                            ad.flatten(z, start_axis=1))), [z])

    def test_upsample_nearest_floor_map(self):
        x = np.arange(8, dtype=np.float64).reshape(1, 1, 2, 2, 2)
        y = ad.upsample_nearest(ad.Tensor(x), (4, 4, 4))
        # output index i reads input floor(i * 2 / 4)
        assert y.data[0, 0, 0, 0, 0] == x[0, 0, 0, 0, 0]
        assert y.data[0, 0, 3, 3, 3] == x[0, 0, 1, 1, 1]

    def test_upsample_gradcheck(self):
        rng = np.random.default_rng(6)
        x = leaf((1, 2, 2, 3, 2), rng)
        gradcheck(lambda: ad.mse(ad.upsample_nearest(x, (4, 5, 3)),
                                 ad.Tensor(np.zeros((1, 2, 4, 5, 3)))), [x])


# ---------------------------------------------------------------------------
# losses / sampling
# ---------------------------------------------------------------------------

class TestLosses:
    def test_mse_identity(self):
        x = np.array([1.0, -2.0, 3.0])
        assert ad.mse(ad.Tensor(x), ad.Tensor(x)).item() == 0.0

    def test_mse_hand_value(self):
        assert ad.mse(ad.Tensor([1.0, 2.0]), ad.Tensor([0.0, 0.0])).item() == 2.5

    def test_mse_gradient_zero_at_minimum(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        loss = ad.mse(x, ad.Tensor([1.0, 2.0]))
        ad.backward(loss)
        assert np.all(x.grad == 0.0)

    def test_kld_standard_normal(self):
        assert ad.kld(ad.Tensor([0.0]), ad.Tensor([0.0])).item() == 0.0

    def test_kld_hand_values(self):
        assert ad.kld(ad.Tensor([1.0]), ad.Tensor([0.0])).item() == 0.5
        v = ad.kld(ad.Tensor([0.0]), ad.Tensor([math.log(4.0)])).item()
        assert abs(v - 0.5 * (4 - math.log(4) - 1)) < 1e-12

    def test_kld_nonnegative_zero_only_at_origin(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            mu = rng.standard_normal(4)
            lv = rng.standard_normal(4)
            v = ad.kld(ad.Tensor(mu), ad.Tensor(lv)).item()
            assert v >= 0.0
            if v == 0.0:
                assert np.all(mu == 0.0) and np.all(lv == 0.0)

    def test_kld_gradcheck(self):
        rng = np.random.default_rng(8)
        mu, lv = leaf((3, 5), rng), leaf((3, 5), rng)
        gradcheck(lambda: ad.kld(mu, lv), [mu, lv])

    def test_reparameterize_hand_values(self):
        mu, lv = ad.Tensor([1.0]), ad.Tensor([0.0])
        assert ad.reparameterize(mu, lv, np.array([0.0])).data[0] == 1.0
        assert ad.reparameterize(mu, lv, np.array([2.0])).data[0] == 3.0
        z = ad.reparameterize(ad.Tensor([1.0]), ad.Tensor([math.log(4.0)]),
                              np.array([0.5]))
        assert abs(z.data[0] - 2.0) < 1e-12

    def test_reparameterize_no_grad_to_eps(self):
        mu = ad.Tensor([1.0, 2.0], requires_grad=True)
        lv = ad.Tensor([0.0, 0.0], requires_grad=True)
        eps = ad.Tensor([0.3, -0.4], requires_grad=True)
        loss = ad.sum_all(ad.reparameterize(mu, lv, eps))
        ad.backward(loss)
        assert eps.grad is None
        assert mu.grad is not None and lv.grad is not None

    def test_reparameterize_seeded_bit_identical(self):
        from thermofuse.rng import substream
        mu, lv = ad.Tensor([0.5, -0.5]), ad.Tensor([0.1, 0.2])
        z1 = ad.reparameterize(mu, lv, substream(9, "reparameterize").standard_normal(2))
        z2 = ad.reparameterize(mu, lv, substream(9, "reparameterize").standard_normal(2))
        assert np.array_equal(z1.data, z2.data)

    def test_reparameterize_gradcheck(self):
        rng = np.random.default_rng(9)
        mu, lv = leaf((4,), rng), leaf((4,), rng)
        eps = rng.standard_normal(4)
        gradcheck(lambda: ad.mse(ad.reparameterize(mu, lv, eps),
                                 ad.Tensor(np.zeros(4))), [mu, lv])


# ---------------------------------------------------------------------------
# backward mechanics
# ---------------------------------------------------------------------------

class TestBackward:
    def test_non_scalar_loss_rejected(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ad.GradientError, match="scalar"):
            ad.backward(ad.relu(x))

    def test_self_target_gradient_zero(self):
        x = ad.Tensor(np.random.default_rng(10).standard_normal(5),
                      requires_grad=True)
        loss = ad.mse(x, x.detach())
        ad.backward(loss)
        assert np.all(x.grad == 0.0)

    def test_two_backward_passes_bit_identical(self):
        rng = np.random.default_rng(11)
        x = leaf((2, 1, 4, 5, 3), rng)
        k = leaf((2, 1, 3, 3, 3), rng)
        W = leaf((2 * 4 * 5 * 3, 3), rng, scale=0.1)
        b = leaf((3,), rng)

        def run():
            h = ad.relu(ad.conv3d(x, k, padding=1))
            out = ad.dense(ad.flatten(h, start_axis=1), W, b)
            loss = ad.mse(out, ad.Tensor(np.zeros(out.shape)))
            ad.backward(loss)
            grads = {id(t): t.grad.copy() for t in (x, k, W, b)}
            for t in (x, k, W, b):
                t.grad = None
            return grads

        g1, g2 = run(), run()
        for key in g1:
            assert np.array_equal(g1[key], g2[key])

    def test_batch_broadcast_add_gradcheck(self):
        rng = np.random.default_rng(14)
        x = leaf((4, 3, 2), rng)
        bias = leaf((3, 2), rng)
        gradcheck(lambda: ad.mse(ad.add(x, bias),
                                 ad.Tensor(np.zeros((4, 3, 2)))), [x, bias])

    def test_scalar_broadcast_add(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        c = ad.Tensor([10.0], requires_grad=True)
        loss = ad.sum_all(ad.add(x, c))
        assert np.array_equal(loss.data, 23.0)
        ad.backward(loss)
        assert np.array_equal(c.grad, [2.0])

    def test_diamond_graph_accumulates(self):
        # y = x*x + x*x: gradient must accumulate both paths (4x)
        x = ad.Tensor([3.0], requires_grad=True)
        sq = ad.mul(x, x)
        loss = ad.sum_all(ad.add(sq, sq))
        ad.backward(loss)
        assert np.allclose(x.grad, [12.0])


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class TestAdam:
    def test_zero_gradient_no_change(self):
        p = ad.Tensor([1.0, 2.0], requires_grad=True)
        p.grad = np.zeros(2)
        opt = ad.Adam({"p": p}, lr=0.1)
        opt.step()
        assert np.array_equal(p.data, [1.0, 2.0])

    def test_first_step_hand_value(self):
        p = ad.Tensor([1.0], requires_grad=True)
        p.grad = np.array([1.0])
        opt = ad.Adam({"p": p}, lr=0.1)
        opt.step()
        # first bias-corrected step moves by ~lr against the gradient sign
        assert abs((1.0 - p.data[0]) - 0.1) < 1e-8

    def test_symmetry(self):
        a = ad.Tensor([0.5, -0.5], requires_grad=True)
        b = ad.Tensor([0.5, -0.5], requires_grad=True)
        g = np.array([0.3, -0.7])
        a.grad, b.grad = g.copy(), g.copy()
        opt = ad.Adam({"a": a, "b": b}, lr=0.01)
        opt.step()
        assert np.array_equal(a.data, b.data)

    def test_non_finite_gradient_names_parameter(self):
        p = ad.Tensor([1.0], requires_grad=True)
        p.grad = np.array([np.nan])
        opt = ad.Adam({"offender": p})
        with pytest.raises(ad.GradientError, match="offender"):
            opt.step()


# ---------------------------------------------------------------------------
# composite gradcheck + properties
# ---------------------------------------------------------------------------

class TestComposite:
    def test_conv_relu_flatten_dense_mse_chain(self):
        rng = np.random.default_rng(12)
        x = leaf((2, 1, 5, 6, 4), rng)
        k = leaf((2, 1, 3, 3, 3), rng, scale=0.3)
        W = leaf((2 * 5 * 6 * 4, 3), rng, scale=0.1)
        b = leaf((3,), rng)
        target = ad.Tensor(rng.standard_normal((2, 3)))

        def f():
            h = ad.relu(ad.conv3d(x, k, padding=1))
            return ad.mse(ad.dense(ad.flatten(h, start_axis=1), W, b), target)

        gradcheck(f, [x, k, W, b])

    def test_vae_style_composite(self):
        rng = np.random.default_rng(13)
        mu_W = leaf((6, 3), rng)
        lv_W = leaf((6, 3), rng, scale=0.1)
        x = ad.Tensor(rng.standard_normal((4, 6)))
        eps = rng.standard_normal((4, 3))

        def f():
            mu = ad.dense(x, mu_W, None)
            lv = ad.dense(x, lv_W, None)
            z = ad.reparameterize(mu, lv, eps)
            return ad.add(ad.mse(z, ad.Tensor(np.zeros((4, 3)))),
                          ad.scale(ad.kld(mu, lv), 1e-2))

        gradcheck(f, [mu_W, lv_W])

    @given(hst.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_relu_mul_add_gradcheck_property(self, seed):
        rng = np.random.default_rng(seed)
        a = leaf((3, 4), rng)
        b = leaf((3, 4), rng)
        gradcheck(lambda: ad.sum_all(ad.mul(ad.relu(a), ad.add(a, b))),
                  [a, b])

    @given(hst.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_kld_nonnegative_property(self, seed):
        rng = np.random.default_rng(seed)
        v = ad.kld(ad.Tensor(rng.standard_normal(6)),
                   ad.Tensor(rng.standard_normal(6))).item()
        assert v >= 0.0
