import numpy as np
import pytest

from haarnet.errors import ShapeError
from haarnet.haar import MHWBlock, haar_forward, mhw_fuse
from haarnet.morpho import StructuringElement, dilate2d
from haarnet.tensor import Tensor, backward, finite_diff_grad, mul, relative_error
from haarnet.tensor import sum as tsum


def haar_oracle(f):
    """Scalar loops over every 2x2 window, summing in row-major window order."""
    n, c, h, w = f.shape
    approx = np.empty((n, c, h // 2, w // 2), dtype=f.dtype)
    details = np.empty((n, 3 * c, h // 2, w // 2), dtype=f.dtype)
    kernels = ([[-1, -1], [1, 1]], [[-1, 1], [-1, 1]], [[1, -1], [-1, 1]])
    for b in range(n):
        for ch in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    win = [f[b, ch, 2 * i + dy, 2 * j + dx] for dy in (0, 1) for dx in (0, 1)]
                    approx[b, ch, i, j] = max(win)
                    for m, kern in enumerate(kernels):
                        acc = f.dtype.type(0)
                        for t, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
                            term = win[t] * f.dtype.type(kern[dy][dx])
                            acc = term if t == 0 else acc + term
                        details[b, 3 * ch + m, i, j] = acc
    return approx, details


class TestHaarForward:
    def test_worked_window(self):
        sb = haar_forward(Tensor([[1.0, 2.0], [3.0, 4.0]]))
        assert sb.approx.item() == 4.0
        assert sb.band("v").item() == 4.0
        assert sb.band("h").item() == 2.0
        assert sb.band("d").item() == 0.0

    def test_constant_input(self):
        sb = haar_forward(Tensor(np.full((2, 3, 6, 4), 0.7)))
        assert np.all(sb.approx.data == np.float32(0.7))
        assert np.all(sb.details.data == 0.0)

    def test_matches_oracle(self, rng):
        for _ in range(20):
            f = rng.standard_normal((2, 3, 8, 6)).astype(np.float32)
            sb = haar_forward(Tensor(f))
            approx, details = haar_oracle(f)
            np.testing.assert_array_equal(sb.approx.data, approx)
            np.testing.assert_array_equal(sb.details.data, details)

    def test_approx_is_flat_stride_two_dilation(self, rng):
        f = Tensor(rng.standard_normal((1, 2, 8, 8)))
        np.testing.assert_array_equal(
            haar_forward(f).approx.data, dilate2d(f, StructuringElement.flat(2, 2), 2, 0).data
        )

    def test_detail_bound(self, rng):
        # each detail is a sum of two differences of input values
        f = rng.uniform(-3, 3, (1, 2, 8, 8)).astype(np.float32)
        spread = f.max() - f.min()
        assert np.all(np.abs(haar_forward(Tensor(f)).details.data) <= 2 * spread)

    def test_odd_sizes_replicate(self):
        f = np.arange(15.0, dtype=np.float32).reshape(1, 1, 3, 5)
        sb = haar_forward(Tensor(f))
        padded = np.pad(f, ((0, 0), (0, 0), (0, 1), (0, 1)), mode="edge")
        approx, details = haar_oracle(padded)
        assert sb.approx.shape == (1, 1, 2, 3)
        np.testing.assert_array_equal(sb.approx.data, approx)
        np.testing.assert_array_equal(sb.details.data, details)

    def test_global_max_survives_every_level(self, rng):
        f = Tensor(rng.standard_normal((1, 1, 32, 32)))
        top = f.data.max()
        current = f
        for _ in range(5):
            current = haar_forward(current).approx
            assert current.data.max() == top

    def test_empty_input(self):
        with pytest.raises(ShapeError):
            haar_forward(Tensor(np.zeros((1, 1, 0, 4))))

    def test_detail_gradient_is_adjoint(self, rng):
        f = Tensor(rng.standard_normal((1, 2, 4, 6)), requires_grad=True)
        w = rng.standard_normal((1, 6, 2, 3)).astype(np.float32)
        backward(tsum(mul(haar_forward(f).details, Tensor(w))))
        # <D f, w> = <f, D^T w> for the linear detail map D
        probe = rng.standard_normal(f.shape).astype(np.float32)
        lhs = float(np.sum(haar_forward(Tensor(probe)).details.data * w, dtype=np.float64))
        rhs = float(np.sum(probe * f.grad, dtype=np.float64))
        assert lhs == pytest.approx(rhs, rel=1e-5)


def _generic(block, rng):
    for p in block.parameters():
        p.data[...] = rng.standard_normal(p.shape) * 0.5


class TestMHW:
    def test_widths(self, rng):
        block = MHWBlock(4, 2, rng)
        assert block.gate_rgb.conv1.weight.shape == (5, 18, 1, 1)
        assert block.gate_rgb.conv2.weight.shape == (4, 5, 1, 1)
        assert block.gate_d.conv2.weight.shape == (2, 5, 1, 1)

    def test_fresh_gates_halve(self, rng):
        block = MHWBlock(2, 1, rng)
        f_rgb = Tensor(rng.standard_normal((2, 2, 6, 6)))
        f_d = Tensor(rng.standard_normal((2, 1, 6, 6)))
        out_rgb, out_d = mhw_fuse(f_rgb, f_d, block)
        np.testing.assert_array_equal(out_rgb.data, haar_forward(f_rgb).approx.data * np.float32(0.5))
        np.testing.assert_array_equal(out_d.data, haar_forward(f_d).approx.data * np.float32(0.5))

    def test_all_zero_gate_network(self, rng):
        block = MHWBlock(1, 1, rng)
        for p in block.parameters():
            p.data[...] = 0.0
        f = Tensor(rng.standard_normal((1, 1, 4, 4)))
        out, _ = mhw_fuse(f, f, block)
        np.testing.assert_array_equal(out.data, haar_forward(f).approx.data * np.float32(0.5))

    def test_constant_inputs(self, rng):
        block = MHWBlock(2, 1, rng)
        _generic(block, rng)
        for gate in (block.gate_rgb, block.gate_d):
            gate.conv1.bias.data[...] = 0.0
            gate.conv2.bias.data[...] = 0.0
            gate.act.h0.data[...] = 0.0
        out_rgb, out_d = mhw_fuse(Tensor(np.full((1, 2, 4, 4), 3.0)), Tensor(np.full((1, 1, 4, 4), -2.0)), block)
        assert np.all(out_rgb.data == 1.5)
        assert np.all(out_d.data == -1.0)

    def test_compositional_oracle(self, rng):
        block = MHWBlock(2, 1, rng, morphological=True)
        _generic(block, rng)
        f_rgb = rng.standard_normal((2, 2, 4, 6)).astype(np.float64)
        f_d = rng.standard_normal((2, 1, 4, 6)).astype(np.float64)
        a_rgb, d_rgb = haar_oracle(f_rgb)
        a_d, d_d = haar_oracle(f_d)
        phi = np.concatenate([d_rgb, d_d], axis=1)

        def gate(net):
            w1 = net.conv1.weight.data[:, :, 0, 0].astype(np.float64)
            hid = np.einsum("oc,nchw->nohw", w1, phi) + net.conv1.bias.data
            hid = np.maximum(net.act.h0.data, hid)
            w2 = net.conv2.weight.data[:, :, 0, 0].astype(np.float64)
            return 1 / (1 + np.exp(-(np.einsum("oc,nchw->nohw", w2, hid) + net.conv2.bias.data)))

        out_rgb, out_d = mhw_fuse(Tensor(f_rgb), Tensor(f_d), block)
        np.testing.assert_allclose(out_rgb.data, a_rgb * gate(block.gate_rgb), rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(out_d.data, a_d * gate(block.gate_d), rtol=1e-5, atol=1e-6)

    def test_gates_bound_outputs(self, rng):
        block = MHWBlock(3, 1, rng)
        _generic(block, rng)
        f_rgb = Tensor(rng.standard_normal((1, 3, 8, 8)))
        f_d = Tensor(rng.standard_normal((1, 1, 8, 8)))
        out_rgb, _ = mhw_fuse(f_rgb, f_d, block)
        assert np.all(np.abs(out_rgb.data) <= np.abs(haar_forward(f_rgb).approx.data))

    def test_depth_gradient_flows_through_rgb_gate(self, rng):
        block = MHWBlock(1, 1, rng)
        _generic(block, rng)
        f_rgb = Tensor(rng.standard_normal((1, 1, 4, 4)))
        f_d = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True)

        def loss(d):
            out_rgb, _ = mhw_fuse(f_rgb, d, block)
            return tsum(out_rgb)

        backward(loss(f_d))
        assert np.any(f_d.grad != 0)
        numeric = finite_diff_grad(loss, f_d, 1e-3).data
        assert relative_error(f_d.grad, numeric) < 1e-3

    def test_modality_mismatch(self, rng):
        block = MHWBlock(1, 1, rng)
        with pytest.raises(ShapeError):
            mhw_fuse(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 6))), block)
        with pytest.raises(ShapeError):
            mhw_fuse(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 1, 4, 4))), block)
