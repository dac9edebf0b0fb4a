import numpy as np
import pytest

from helpers import central_diff, flatten_params, param_grad_flat, rel_err, set_params_from_flat
from protomem.backbone import (
    DenseLayer,
    GradientTape,
    ModelParams,
    backward,
    forward_backbone,
    forward_fcr,
    init_model,
    load_params,
    params_checksum,
    save_params,
    sgd_step,
)
from protomem.errors import (
    FormatVersionMismatchError,
    NoForwardRecordedError,
    ShapeMismatchError,
)


def tiny_net(seed=0):
    return init_model([6, 5, 4, 3], split_point=2, seed=seed)


def python_forward(params, x):
    """Independent straight-line oracle with the same accumulation order."""
    a = [float(v) for v in x]
    for layer in params.layers:
        w, b = layer.weight, layer.bias
        out = []
        for j in range(w.shape[1]):
            acc = 0.0
            for i in range(w.shape[0]):
                acc += a[i] * w[i, j]
            acc = acc + b[j]
            out.append(max(acc, 0.0) if layer.activation == "relu" else acc)
        a = out
    return np.array(a)


class TestForward:
    def test_identity_single_layer(self):
        layer = DenseLayer(np.eye(2), np.zeros(2))
        params = ModelParams([layer], split_point=1)
        np.testing.assert_array_equal(forward_backbone(params, [1.0, 2.0]), [1.0, 2.0])

    def test_zero_weights_give_bias(self):
        layer = DenseLayer(np.zeros((3, 2)), np.array([0.5, -1.5]))
        params = ModelParams([layer], split_point=1)
        np.testing.assert_array_equal(forward_backbone(params, [9.0, 9.0, 9.0]), [0.5, -1.5])

    def test_matches_straight_line_oracle(self):
        params = tiny_net(3)
        rng = np.random.default_rng(1)
        x = rng.standard_normal(6)
        got = forward_fcr(params, forward_backbone(params, x))
        np.testing.assert_array_equal(got, python_forward(params, x))

    def test_identity_projection(self):
        # d_a == d_p only in this constructed test
        layers = [
            DenseLayer(np.eye(3), np.zeros(3), "relu"),
            DenseLayer(np.eye(3), np.zeros(3)),
        ]
        params = ModelParams(layers, split_point=1)
        theta_a = np.array([0.5, 1.5, 2.5])
        np.testing.assert_array_equal(forward_fcr(params, theta_a), theta_a)

    def test_projection_zero_weights_give_bias(self):
        layers = [
            DenseLayer(np.eye(3), np.zeros(3), "relu"),
            DenseLayer(np.zeros((3, 2)), np.array([1.0, 2.0])),
        ]
        params = ModelParams(layers, split_point=1)
        np.testing.assert_array_equal(forward_fcr(params, [5.0, 5.0, 5.0]), [1.0, 2.0])

    def test_deterministic(self):
        params = tiny_net(9)
        x = np.linspace(-1, 1, 6)
        a = forward_fcr(params, forward_backbone(params, x))
        b = forward_fcr(params, forward_backbone(params, x))
        np.testing.assert_array_equal(a, b)

    def test_shape_mismatch(self):
        params = tiny_net()
        with pytest.raises(ShapeMismatchError):
            forward_backbone(params, np.ones(4))

    def test_forward_counter_counts_rows(self):
        params = tiny_net()
        assert params.forward_calls == 0
        forward_backbone(params, np.ones(6))
        assert params.forward_calls == 1
        forward_backbone(params, np.ones((5, 6)))
        assert params.forward_calls == 6


class TestBackward:
    def test_single_layer_sum_loss(self):
        # L = sum(out) for out = x @ W + b: dL/dW[i, j] = x[i]
        layer = DenseLayer(np.zeros((3, 2)), np.zeros(2))
        params = ModelParams([layer], split_point=1)
        x = np.array([1.0, -2.0, 3.0])
        tape = GradientTape()
        forward_backbone(params, x, tape)
        backward(params, tape, np.ones(2))
        np.testing.assert_array_equal(tape.grad_w[0], np.outer(x, np.ones(2)))
        np.testing.assert_array_equal(tape.grad_b[0], np.ones(2))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for seed in range(5):
            params = tiny_net(seed)
            x = rng.standard_normal(6)
            target = rng.standard_normal(3)

            def loss_at(flat):
                set_params_from_flat(params, flat)
                out = forward_fcr(params, forward_backbone(params, x))
                return float(((out - target) ** 2).sum())

            flat0 = flatten_params(params)
            tape = GradientTape()
            out = forward_fcr(params, forward_backbone(params, x, tape), tape)
            backward(params, tape, 2.0 * (out - target))
            analytic = param_grad_flat(tape, params)
            numeric = central_diff(loss_at, flat0)
            set_params_from_flat(params, flat0)
            worst = max(worst, rel_err(analytic, numeric))
        assert worst < 1e-4

    def test_input_gradient(self):
        params = tiny_net(5)
        x = np.linspace(0.1, 0.6, 6)
        tape = GradientTape()
        out = forward_fcr(params, forward_backbone(params, x, tape), tape)
        backward(params, tape, 2.0 * out)
        numeric = central_diff(
            lambda v: float((forward_fcr(params, forward_backbone(params, v)) ** 2).sum()), x
        )
        assert rel_err(tape.input_grad, numeric) < 1e-6

    def test_frozen_backbone_keeps_buffers_zero(self):
        params = tiny_net(2)
        before = params_checksum(params)
        x = np.ones(6)
        tape = GradientTape()
        forward_fcr(params, forward_backbone(params, x, tape), tape)
        backward(params, tape, np.ones(3), frozen_backbone=True)
        for idx in range(params.split_point):
            assert not tape.grad_w[idx].any()
            assert not tape.grad_b[idx].any()
        sgd_step(params, tape, 0.5)
        # projection moved, extractor bitwise identical
        assert params_checksum(params) != before
        fresh = tiny_net(2)
        for idx in range(params.split_point):
            np.testing.assert_array_equal(params.layers[idx].weight, fresh.layers[idx].weight)

    def test_requires_forward(self):
        params = tiny_net()
        with pytest.raises(NoForwardRecordedError):
            backward(params, GradientTape(), np.ones(3))


class TestCompositeLossGradients:
    def test_pretrain_objective_through_all_parameters(self):
        # full chain: extractor -> projection -> linear head -> CE + ortho,
        # finite differences over every weight and bias, 20 configurations
        from protomem.losses import PretrainLossConfig, ortho_loss, softmax_ce_batch
        from protomem.numerics import matmul

        rng = np.random.default_rng(77)
        cfg = PretrainLossConfig(lambda_ortho=0.2)
        worst = 0.0
        done = 0
        trial = 0
        while done < 20:
            trial += 1
            params = init_model([4, 4, 3], 1, seed=trial)
            head_w = rng.standard_normal((2, 3)) * 0.5
            x = rng.standard_normal((3, 4))
            targets = rng.integers(0, 2, 3)
            probe = forward_fcr(params, forward_backbone(params, x))
            if np.linalg.norm(probe, axis=1).min() < 1e-3:  # dead-relu row
                continue
            done += 1

            def composite(p):
                theta = forward_fcr(p, forward_backbone(p, x))
                logits = matmul(theta, head_w.T)
                ce, _ = softmax_ce_batch(logits, targets)
                ol, _ = ortho_loss(theta)
                return ce + cfg.lambda_ortho * ol

            tape = GradientTape()
            theta = forward_fcr(params, forward_backbone(params, x, tape), tape)
            logits = matmul(theta, head_w.T)
            _, grad_logits = softmax_ce_batch(logits, targets)
            _, grad_theta = ortho_loss(theta)
            upstream = matmul(grad_logits, head_w) + cfg.lambda_ortho * grad_theta
            backward(params, tape, upstream)
            analytic = param_grad_flat(tape, params)

            flat0 = flatten_params(params)

            def loss_at(flat):
                set_params_from_flat(params, flat)
                return composite(params)

            numeric = central_diff(loss_at, flat0)
            set_params_from_flat(params, flat0)
            worst = max(worst, rel_err(analytic, numeric))
        assert worst < 1e-4


class TestSgdStep:
    def test_lr_zero_keeps_params_bitwise(self):
        params = tiny_net(4)
        before = params_checksum(params)
        tape = GradientTape()
        forward_backbone(params, np.ones(6), tape)
        backward(params, tape, np.ones(4))
        sgd_step(params, tape, 0.0)
        assert params_checksum(params) == before

    def test_one_step_exact(self):
        layer = DenseLayer(np.full((2, 2), 0.5), np.zeros(2))
        params = ModelParams([layer], split_point=1)
        tape = GradientTape()
        forward_backbone(params, [1.0, 1.0], tape)
        backward(params, tape, np.array([1.0, 2.0]))
        g = tape.grad_w[0].copy()
        sgd_step(params, tape, 0.1)
        np.testing.assert_array_equal(params.layers[0].weight, np.full((2, 2), 0.5) - 0.1 * g)

    def test_quadratic_converges(self):
        # minimize (out - 3)^2 over a single 1x1 layer
        layer = DenseLayer(np.array([[0.0]]), np.zeros(1))
        params = ModelParams([layer], split_point=1)
        for _ in range(1000):
            tape = GradientTape()
            out = forward_backbone(params, [1.0], tape)
            backward(params, tape, 2.0 * (out - 3.0))
            sgd_step(params, tape, 0.1)
        final = forward_backbone(params, [1.0])[0]
        assert abs(final - 3.0) < 1e-6

    def test_requires_grads(self):
        params = tiny_net()
        with pytest.raises(NoForwardRecordedError):
            sgd_step(params, GradientTape(), 0.1)


class TestSaveLoad:
    def test_round_trip_bitwise(self, tmp_path):
        params = tiny_net(8)
        path = tmp_path / "net.ofsc"
        save_params(params, path)
        loaded = load_params(path)
        assert params_checksum(loaded) == params_checksum(params)
        assert loaded.split_point == params.split_point
        assert [l.activation for l in loaded.layers] == [l.activation for l in params.layers]

    def test_truncated_file(self, tmp_path):
        params = tiny_net(8)
        path = tmp_path / "net.ofsc"
        save_params(params, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatVersionMismatchError):
            load_params(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "net.ofsc"
        params = tiny_net(8)
        save_params(params, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatVersionMismatchError):
            load_params(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "net.ofsc"
        params = tiny_net(8)
        save_params(params, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatVersionMismatchError):
            load_params(path)


class TestInit:
    def test_seeded_init_reproducible(self):
        a = init_model([6, 5, 4, 3], 2, seed=42)
        b = init_model([6, 5, 4, 3], 2, seed=42)
        assert params_checksum(a) == params_checksum(b)

    def test_glorot_bounds(self):
        params = init_model([100, 50, 20], 1, seed=0)
        w = params.layers[0].weight
        limit = np.sqrt(6.0 / 150.0)
        assert np.all(np.abs(w) <= limit)

    def test_rejects_non_reducing_projection(self):
        with pytest.raises(ShapeMismatchError):
            init_model([6, 4, 8], 1, seed=0)

    def test_dims(self):
        params = tiny_net()
        assert params.input_dim == 6 and params.d_a == 4 and params.d_p == 3
