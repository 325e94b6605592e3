import numpy as np
import pytest

from stagenet import engine
from stagenet.engine import (
    ParamSet,
    SGDMomentum,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    ValidationError,
)


class TestHandValues:
    """Outputs pinned by hand arithmetic before any gradient machinery."""

    def test_dense_vector(self):
        W = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([0.0, 0.0])
        y = engine.dense(Tensor([1.0, 1.0]), W, b)
        np.testing.assert_array_equal(y.data, [3.0, 7.0])

    def test_dense_batch_matches_vector(self, rng):
        W = Tensor(rng.standard_normal((3, 5)))
        b = Tensor(rng.standard_normal(3))
        xs = rng.standard_normal((4, 5)).astype(np.float32)
        batched = engine.dense(Tensor(xs), W, b).data
        for i in range(4):
            single = engine.dense(Tensor(xs[i]), W, b).data
            np.testing.assert_allclose(batched[i], single, rtol=1e-6)

    def test_conv_all_ones(self):
        x = Tensor(np.ones((3, 3, 1)))
        K = Tensor(np.ones((3, 3, 1, 1)))
        out = engine.conv2d(x, K, stride=1, pad=0)
        assert out.data.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == pytest.approx(9.0)

    def test_conv_stride_pad_extents(self):
        # 8x8 map, 3x3 kernel, stride 2, pad 1 -> 4x4
        x = Tensor(np.zeros((8, 8, 2)))
        K = Tensor(np.zeros((3, 3, 2, 5)))
        assert engine.conv2d(x, K, stride=2, pad=1).data.shape == (4, 4, 5)
        # 1x1 projection at stride 2 keeps the same grid
        K1 = Tensor(np.zeros((1, 1, 2, 5)))
        assert engine.conv2d(x, K1, stride=2, pad=0).data.shape == (4, 4, 5)

    def test_conv_matches_direct_loops(self, rng):
        x = rng.standard_normal((6, 7, 3))
        K = rng.standard_normal((3, 3, 3, 4))
        got = engine.conv2d(Tensor(x), Tensor(K), stride=2, pad=1).data
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        want = np.zeros_like(got)
        for i in range(got.shape[0]):
            for j in range(got.shape[1]):
                patch = xp[2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
                want[i, j] = np.tensordot(patch, K, axes=([0, 1, 2], [0, 1, 2]))
        np.testing.assert_allclose(got, want, rtol=1e-5)

    def test_cross_entropy_uniform_logits(self):
        loss = engine.softmax_cross_entropy(Tensor([0.0, 0.0]), 0)
        assert loss.item() == pytest.approx(np.log(2.0), rel=1e-6)

    def test_cross_entropy_probability_target(self):
        logits = Tensor([1.0, 2.0, 3.0])
        p = engine.softmax(logits.data)
        loss = engine.softmax_cross_entropy(logits, Tensor(p))
        want = -(p * np.log(p)).sum()
        assert loss.item() == pytest.approx(want, rel=1e-5)

    def test_cross_entropy_stable_at_huge_logits(self):
        loss = engine.softmax_cross_entropy(Tensor([1e4, -1e4]), 0)
        assert np.isfinite(loss.data)
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_l2_reconstruction_mean_convention(self):
        z = Tensor(np.zeros((2, 2)))
        z_hat = Tensor(np.full((2, 2), 2.0))
        loss = engine.l2_reconstruction(z, z_hat)
        assert loss.item() == pytest.approx(4.0)

    def test_global_avgpool(self):
        z = Tensor(np.arange(8.0).reshape(2, 2, 2))
        np.testing.assert_allclose(engine.global_avgpool(z).data, [3.0, 4.0])

    def test_relu_subgradient_zero_at_zero(self):
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = engine.sum_all(engine.relu(x))
        engine.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


class TestFiniteDifference:
    """Every primitive against the central-difference oracle (float64)."""

    def test_add(self, fd_check, rng):
        fd_check(engine.add, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))])

    def test_sub(self, fd_check, rng):
        fd_check(engine.sub, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))])

    def test_mul(self, fd_check, rng):
        fd_check(engine.mul, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))])

    def test_scale(self, fd_check, rng):
        fd_check(lambda t: engine.scale(t, -1.7), [rng.standard_normal((2, 5))])

    def test_sum_all(self, fd_check, rng):
        fd_check(engine.sum_all, [rng.standard_normal((4, 3))])

    def test_relu(self, fd_check, rng):
        x = rng.standard_normal((5, 5))
        x[np.abs(x) < 0.05] = 0.2  # keep away from the kink
        fd_check(engine.relu, [x])

    def test_dense_vector(self, fd_check, rng):
        fd_check(engine.dense,
                 [rng.standard_normal(4), rng.standard_normal((3, 4)), rng.standard_normal(3)])

    def test_dense_batch(self, fd_check, rng):
        fd_check(engine.dense,
                 [rng.standard_normal((6, 4)), rng.standard_normal((3, 4)), rng.standard_normal(3)])

    def test_bias_add(self, fd_check, rng):
        fd_check(engine.bias_add, [rng.standard_normal((2, 3, 3, 4)), rng.standard_normal(4)])

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 1)])
    def test_conv2d(self, fd_check, rng, stride, pad, k):
        fd_check(lambda x, K: engine.conv2d(x, K, stride=stride, pad=pad),
                 [rng.standard_normal((6, 6, 2)), rng.standard_normal((k, k, 2, 3))])

    def test_conv2d_batched(self, fd_check, rng):
        fd_check(lambda x, K: engine.conv2d(x, K, stride=2, pad=1),
                 [rng.standard_normal((2, 5, 5, 2)), rng.standard_normal((3, 3, 2, 3))])

    def test_global_avgpool(self, fd_check, rng):
        fd_check(engine.global_avgpool, [rng.standard_normal((3, 4, 5))])
        fd_check(engine.global_avgpool, [rng.standard_normal((2, 3, 4, 5))])

    def test_softmax_cross_entropy_index(self, fd_check, rng):
        fd_check(engine.softmax_cross_entropy, [rng.standard_normal((4, 5))],
                 kwargs={"target": np.array([0, 2, 4, 1])})

    def test_softmax_cross_entropy_probs(self, fd_check, rng):
        p = engine.softmax(rng.standard_normal((3, 4)))
        fd_check(engine.softmax_cross_entropy, [rng.standard_normal((3, 4))],
                 kwargs={"target": Tensor(p.astype(np.float64))})

    def test_softmax_cross_entropy_temperature(self, fd_check, rng):
        p = engine.softmax(rng.standard_normal((3, 4)))
        fd_check(engine.softmax_cross_entropy, [rng.standard_normal((3, 4))],
                 kwargs={"target": Tensor(p.astype(np.float64)), "temperature": 2.0})

    def test_l2_reconstruction(self, fd_check, rng):
        fd_check(engine.l2_reconstruction,
                 [rng.standard_normal((2, 3, 3, 4)), rng.standard_normal((2, 3, 3, 4))])

    def test_composite_chain(self, fd_check, rng):
        def net(x, K, b):
            h = engine.relu(engine.bias_add(engine.conv2d(x, K, stride=1, pad=1), b))
            return engine.global_avgpool(h)

        fd_check(net, [rng.standard_normal((5, 5, 2)),
                       rng.standard_normal((3, 3, 2, 3)),
                       rng.standard_normal(3)])


class TestTapeContract:
    def test_backward_accumulates_through_shared_input(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            y = engine.add(x, x)
            loss = engine.sum_all(y)
        engine.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_tape_reuse_raises(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            loss = engine.sum_all(x)
        engine.backward(tape, loss)
        with pytest.raises(TapeError):
            engine.backward(tape, loss)

    def test_foreign_loss_raises(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape_a:
            loss_a = engine.sum_all(x)
        with Tape() as tape_b:
            engine.sum_all(x)
        del loss_a
        with Tape() as tape_c:
            loss_c = engine.sum_all(x)
        with pytest.raises(TapeError):
            tape_b.backward(loss_c)
        engine.backward(tape_c, loss_c)

    def test_non_scalar_loss_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = engine.relu(x)
        with pytest.raises(TapeError):
            engine.backward(tape, y)

    def test_no_recording_outside_tape(self):
        x = Tensor([1.0], requires_grad=True)
        y = engine.relu(x)
        assert y.node_id is None and not y.requires_grad

    def test_no_recording_without_requires_grad(self):
        with Tape() as tape:
            engine.relu(engine.add(Tensor([1.0]), Tensor([2.0])))
        assert len(tape) == 0

    def test_frozen_input_gets_no_grad_but_passes_signal(self):
        """Gradient must flow *through* a frozen weight into its inputs."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        W = Tensor([[1.0, 1.0]], requires_grad=False)
        b = Tensor([0.0], requires_grad=False)
        with Tape() as tape:
            loss = engine.sum_all(engine.dense(x, W, b))
        engine.backward(tape, loss)
        assert W.grad is None and b.grad is None
        np.testing.assert_array_equal(x.grad, [1.0, 1.0])


class TestInit:
    def test_he_variance(self):
        t = engine.he_init((100000,), fan_in=50, seed=7)
        var = float(t.data.astype(np.float64).var())
        assert abs(var - 0.04) <= 0.05 * 0.04
        assert abs(float(t.data.mean())) < 0.005

    def test_deterministic_and_seed_sensitive(self):
        a = engine.he_init((4, 4), fan_in=16, seed=3)
        b = engine.he_init((4, 4), fan_in=16, seed=3)
        c = engine.he_init((4, 4), fan_in=16, seed=4)
        np.testing.assert_array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)

    def test_bad_args(self):
        with pytest.raises(ValidationError):
            engine.he_init((3,), fan_in=0, seed=0)
        with pytest.raises(ShapeError):
            engine.he_init((0, 2), fan_in=4, seed=0)


class TestOptimizer:
    def _single_param(self, value):
        ps = ParamSet()
        t = Tensor([value], requires_grad=True)
        ps.add_group("w", [t])
        return ps, t

    def test_plain_step(self):
        ps, t = self._single_param(1.0)
        opt = SGDMomentum(ps, lr=0.1, momentum=0.0, weight_decay=0.0)
        t.grad = np.array([0.1], dtype=np.float32)
        opt.step()
        assert t.data[0] == pytest.approx(0.99)

    def test_weight_decay_step(self):
        ps, t = self._single_param(1.0)
        opt = SGDMomentum(ps, lr=0.1, momentum=0.0, weight_decay=0.0001)
        t.grad = np.array([0.1], dtype=np.float32)
        opt.step()
        assert t.data[0] == pytest.approx(0.98999)

    def test_momentum_recurrence(self):
        ps, t = self._single_param(0.0)
        opt = SGDMomentum(ps, lr=0.1, momentum=0.9, weight_decay=0.0)
        t.grad = np.array([1.0], dtype=np.float32)
        opt.step()
        assert t.data[0] == pytest.approx(-0.1)
        t.grad = np.array([1.0], dtype=np.float32)
        opt.step()
        # v2 = 0.9 * 1 + 1 = 1.9 -> theta = -0.1 - 0.19
        assert t.data[0] == pytest.approx(-0.29)

    def test_frozen_group_is_bit_identical_after_steps(self):
        ps = ParamSet()
        w = Tensor([1.0, 2.0], requires_grad=True)
        f = Tensor([5.0, 6.0], requires_grad=True)
        ps.add_group("w", [w])
        ps.add_group("f", [f])
        ps.freeze("f")
        before = f.data.tobytes()
        opt = SGDMomentum(ps, lr=0.5, momentum=0.9)
        for _ in range(3):
            w.grad = np.array([1.0, 1.0], dtype=np.float32)
            opt.step()
        assert f.data.tobytes() == before
        assert not f.requires_grad

    def test_step_without_grad_raises(self):
        ps, _ = self._single_param(1.0)
        opt = SGDMomentum(ps, lr=0.1)
        with pytest.raises(ValidationError):
            opt.step()

    def test_fresh_optimizer_resets_velocity(self):
        ps, t = self._single_param(0.0)
        opt = SGDMomentum(ps, lr=0.1, momentum=0.9)
        t.grad = np.array([1.0], dtype=np.float32)
        opt.step()
        # a new optimizer for the same params starts from zero velocity
        opt2 = SGDMomentum(ps, lr=0.1, momentum=0.9)
        t.grad = np.array([1.0], dtype=np.float32)
        opt2.step()
        assert t.data[0] == pytest.approx(-0.2)


class TestParamSet:
    def test_duplicate_group_rejected(self):
        ps = ParamSet()
        ps.add_group("a", [Tensor([1.0])])
        with pytest.raises(ValidationError):
            ps.add_group("a", [Tensor([2.0])])

    def test_tensor_in_two_groups_rejected(self):
        ps = ParamSet()
        t = Tensor([1.0])
        ps.add_group("a", [t])
        with pytest.raises(ValidationError):
            ps.add_group("b", [t])

    def test_clone_is_deep_and_preserves_frozen(self):
        ps = ParamSet()
        t = Tensor([1.0, 2.0], requires_grad=True)
        ps.add_group("g", [t])
        ps.freeze("g")
        c = ps.clone()
        c.group("g")[0].data[0] = 99.0
        assert t.data[0] == 1.0
        assert "g" in c.frozen and not c.group("g")[0].requires_grad

    def test_copy_values_from_checks_shapes(self):
        ps = ParamSet()
        ps.add_group("g", [Tensor(np.zeros((2, 2)), requires_grad=True)])
        with pytest.raises(ShapeError):
            ps.copy_values_from("g", [Tensor(np.zeros(3))])
        ps.copy_values_from("g", [Tensor(np.ones((2, 2)))])
        np.testing.assert_array_equal(ps.group("g")[0].data, np.ones((2, 2)))


class TestShapeAndValidationErrors:
    def test_add_mismatch(self):
        with pytest.raises(ShapeError):
            engine.add(Tensor([1.0]), Tensor([1.0, 2.0]))

    def test_dense_mismatch(self):
        with pytest.raises(ShapeError):
            engine.dense(Tensor([1.0, 2.0, 3.0]), Tensor([[1.0, 2.0]]), Tensor([0.0]))

    def test_conv_channel_mismatch(self):
        with pytest.raises(ShapeError):
            engine.conv2d(Tensor(np.zeros((4, 4, 3))), Tensor(np.zeros((3, 3, 2, 1))))

    def test_conv_too_small_input(self):
        with pytest.raises(ShapeError):
            engine.conv2d(Tensor(np.zeros((2, 2, 1))), Tensor(np.zeros((3, 3, 1, 1))))

    def test_probability_target_must_sum_to_one(self):
        with pytest.raises(ValidationError):
            engine.softmax_cross_entropy(Tensor([1.0, 2.0]), Tensor([0.5, 0.6]))

    def test_index_target_out_of_range(self):
        with pytest.raises(ValidationError):
            engine.softmax_cross_entropy(Tensor([1.0, 2.0]), 2)

    def test_temperature_positive(self):
        with pytest.raises(ValidationError):
            engine.softmax_cross_entropy(Tensor([1.0, 2.0]), 0, temperature=0.0)

    def test_checked_mode_flags_nonfinite(self):
        engine.set_checked(True)
        try:
            with np.errstate(over="ignore"), pytest.raises(ValidationError):
                engine.mul(Tensor([1e38]), Tensor([1e38]))
        finally:
            engine.set_checked(False)
