import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import central_diff, rel_err
from protomem.backbone import (
    GradientTape,
    backward,
    forward_backbone,
    forward_fcr,
    init_model,
    params_checksum,
)
from protomem.errors import (
    DuplicateClassError,
    EmptySampleSetError,
    MisalignedMemoriesError,
)
from protomem.memory import ExplicitMemory, QuantSpec, bipolarize, classify, quantize_feature
from protomem.numerics import cossim
from protomem.online import (
    ActivationMemory,
    FinetuneConfig,
    _cosine_target_grad,
    finetune_fcr,
    learn_class,
    load_actmem,
    save_actmem,
    subbatch_plan,
)


def net(seed=0):
    return init_model([8, 6, 4], split_point=1, seed=seed)


def fresh_memories(params):
    return ExplicitMemory(params.d_p, QuantSpec()), ActivationMemory(params.d_a)


class TestLearnClass:
    def test_single_shot_equals_quantized_feature(self):
        params = net(1)
        em, am = fresh_memories(params)
        rng = np.random.default_rng(0)
        x = rng.standard_normal(8)
        learn_class(em, am, params, [x], class_id=3)
        theta_p = forward_fcr(params, forward_backbone(params, x))
        expected = quantize_feature(theta_p, em.quant.feature_bits).values
        np.testing.assert_array_equal(em.get(3).accum, expected)
        np.testing.assert_array_equal(em.get(3).quantized, expected)
        assert em.get(3).count == 1

    def test_identical_shots_keep_direction(self):
        params = net(2)
        em, am = fresh_memories(params)
        x = np.linspace(-1, 1, 8)
        learn_class(em, am, params, np.tile(x, (5, 1)), class_id=0)
        single = quantize_feature(
            forward_fcr(params, forward_backbone(params, x)), 8
        ).values
        proto = em.get(0)
        np.testing.assert_array_equal(proto.accum, 5 * single)
        assert cossim(proto.mean_vector(), single.astype(float)) == pytest.approx(1.0)

    def test_matches_two_pass_mean_oracle(self):
        params = net(3)
        em, am = fresh_memories(params)
        rng = np.random.default_rng(5)
        samples = rng.standard_normal((5, 8))
        learn_class(em, am, params, samples, class_id=1)
        # two-pass oracle: quantize every feature, then take the mean
        qs = [
            quantize_feature(forward_fcr(params, forward_backbone(params, s)), 8).values
            for s in samples
        ]
        oracle_mean = np.stack(qs).astype(np.float64).mean(axis=0)
        np.testing.assert_array_equal(em.get(1).mean_vector(), oracle_mean)
        np.testing.assert_array_equal(em.get(1).accum, np.stack(qs).sum(axis=0))

    def test_single_pass_counter(self):
        params = net(4)
        em, am = fresh_memories(params)
        rng = np.random.default_rng(6)
        before = params.forward_calls
        learn_class(em, am, params, rng.standard_normal((7, 8)), class_id=0)
        assert params.forward_calls - before == 7

    def test_weights_untouched(self):
        params = net(5)
        em, am = fresh_memories(params)
        checksum = params_checksum(params)
        learn_class(em, am, params, np.random.default_rng(0).standard_normal((4, 8)), 0)
        assert params_checksum(params) == checksum

    def test_duplicate_class(self):
        params = net(6)
        em, am = fresh_memories(params)
        x = np.ones((1, 8))
        learn_class(em, am, params, x, 2)
        with pytest.raises(DuplicateClassError):
            learn_class(em, am, params, x, 2)

    def test_empty_sample_set(self):
        params = net(7)
        em, am = fresh_memories(params)
        with pytest.raises(EmptySampleSetError):
            learn_class(em, am, params, np.zeros((0, 8)), 0)

    def test_activation_memory_mean(self):
        params = net(8)
        em, am = fresh_memories(params)
        rng = np.random.default_rng(1)
        samples = rng.standard_normal((6, 8))
        learn_class(em, am, params, samples, 4)
        thetas = forward_backbone(params, samples)
        np.testing.assert_allclose(am.mean(4), thetas.mean(axis=0), atol=1e-12)

    def test_training_samples_classified_back(self):
        params = net(9)
        em, am = fresh_memories(params)
        rng = np.random.default_rng(2)
        sets = {c: rng.standard_normal((5, 8)) + 3 * rng.standard_normal(8) for c in range(4)}
        for c, samples in sets.items():
            learn_class(em, am, params, samples, c)
        # shots classify back to their class at least as often as the
        # full-precision oracle (brute-force cosine against class means)
        means = {c: em.get(c).mean_vector() for c in em.class_ids()}

        def oracle_pred(feat):
            return max(
                means,
                key=lambda c: float(means[c] @ feat)
                / (np.linalg.norm(means[c]) * np.linalg.norm(feat)),
            )

        hits = oracle_hits = total = 0
        for c, samples in sets.items():
            for s in samples:
                feat = forward_fcr(params, forward_backbone(params, s))
                pred, _ = classify(em, feat)
                hits += int(pred == c)
                oracle_hits += int(oracle_pred(feat) == c)
                total += 1
        assert hits >= oracle_hits
        assert oracle_hits / total > 0.8


class TestSubbatchPlan:
    def test_even_groups(self):
        assert subbatch_plan(6, 2) == [[0, 1], [2, 3], [4, 5]]

    def test_single_group(self):
        assert subbatch_plan(3, 10) == [[0, 1, 2]]

    def test_last_group_smaller(self):
        assert subbatch_plan(5, 2) == [[0, 1], [2, 3], [4]]

    @settings(max_examples=100)
    @given(st.integers(1, 200), st.integers(1, 50))
    def test_partition_property(self, n, size):
        plan = subbatch_plan(n, size)
        flat = [i for group in plan for i in group]
        assert sorted(flat) == list(range(n))
        assert len(flat) == len(set(flat))
        assert all(len(g) <= size for g in plan)

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            subbatch_plan(4, 0)


class TestFinetune:
    def setup_state(self, seed=0):
        params = net(seed)
        em, am = fresh_memories(params)
        rng = np.random.default_rng(seed + 100)
        for c in range(6):
            learn_class(em, am, params, rng.standard_normal((5, 8)) + c * 0.3, c)
        return params, em, am

    def test_lr_zero_keeps_weights_bitwise(self):
        params, em, am = self.setup_state(1)
        checksum = params_checksum(params)
        finetune_fcr(params, am, em, FinetuneConfig(epochs=3, sub_batch=2, lr=0.0))
        assert params_checksum(params) == checksum

    def test_backbone_and_memory_untouched(self):
        params, em, am = self.setup_state(2)
        frozen = [params.layers[i].weight.copy() for i in range(params.split_point)]
        protos_before = {c: em.get(c).quantized.copy() for c in em.class_ids()}
        finetune_fcr(params, am, em, FinetuneConfig(epochs=5, sub_batch=3, lr=0.05))
        for i, w in enumerate(frozen):
            np.testing.assert_array_equal(params.layers[i].weight, w)
        for c, q in protos_before.items():
            np.testing.assert_array_equal(em.get(c).quantized, q)

    def test_single_class_alignment_improves_monotonically(self):
        params = net(11)
        em, am = fresh_memories(params)
        rng = np.random.default_rng(42)
        learn_class(em, am, params, rng.standard_normal((5, 8)), 0)
        target = bipolarize(em.get(0).quantized).astype(np.float64)

        def alignment():
            return cossim(forward_fcr(params, am.mean(0)), target)

        values = [alignment()]
        for _ in range(10):
            finetune_fcr(params, am, em, FinetuneConfig(epochs=1, sub_batch=1, lr=0.05))
            values.append(alignment())
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_cosine_objective_gradient(self):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(10):
            y = rng.standard_normal(6)
            t = bipolarize(rng.standard_normal(6)).astype(np.float64)
            _, grad = _cosine_target_grad(y, t)
            numeric = central_diff(lambda v: _cosine_target_grad(v, t)[0], y)
            worst = max(worst, rel_err(grad, numeric))
        assert worst < 1e-6

    def test_fcr_weight_gradient_matches_fd(self):
        # full chain: projection weights -> cosine objective
        params, em, am = self.setup_state(4)
        ids = sorted(em.class_ids())
        inputs = np.stack([am.mean(c) for c in ids])
        targets = np.stack(
            [bipolarize(em.get(c).quantized).astype(np.float64) for c in ids]
        )
        layer = params.layers[-1]
        flat0 = layer.weight.ravel().copy()

        def loss_at(flat):
            layer.weight[...] = flat.reshape(layer.weight.shape)
            out = forward_fcr(params, inputs)
            total = 0.0
            for j in range(len(ids)):
                total += _cosine_target_grad(out[j], targets[j])[0]
            return total

        tape = GradientTape()
        out = forward_fcr(params, inputs, tape)
        upstream = np.zeros_like(out)
        for j in range(len(ids)):
            _, upstream[j] = _cosine_target_grad(out[j], targets[j])
        backward(params, tape, upstream, frozen_backbone=True)
        analytic = tape.grad_w[len(params.layers) - 1].ravel().copy()
        numeric = central_diff(loss_at, flat0)
        layer.weight[...] = flat0.reshape(layer.weight.shape)
        assert rel_err(analytic, numeric) < 1e-4

    def test_misaligned_memories(self):
        params, em, am = self.setup_state(5)
        am.add_batch(99, np.ones(params.d_a))
        with pytest.raises(MisalignedMemoriesError):
            finetune_fcr(params, am, em, FinetuneConfig(epochs=1, sub_batch=2, lr=0.1))

    def test_loss_history_length(self):
        params, em, am = self.setup_state(6)
        history = finetune_fcr(params, am, em, FinetuneConfig(epochs=7, sub_batch=2, lr=0.01))
        assert len(history) == 7


class TestActivationMemorySnapshot:
    def test_round_trip(self, tmp_path):
        am = ActivationMemory(5)
        rng = np.random.default_rng(12)
        am.add_batch(3, rng.standard_normal((4, 5)))
        am.add_batch(8, rng.standard_normal((2, 5)))
        path = tmp_path / "mem.ofam"
        save_actmem(am, path)
        back = load_actmem(path)
        assert back.class_ids() == am.class_ids()
        for c in am.class_ids():
            np.testing.assert_array_equal(back.mean(c), am.mean(c))
            assert back.count(c) == am.count(c)

    def test_bad_magic(self, tmp_path):
        from protomem.errors import FormatVersionMismatchError

        path = tmp_path / "x.ofam"
        path.write_bytes(b"HUH?" + bytes(24))
        with pytest.raises(FormatVersionMismatchError):
            load_actmem(path)
