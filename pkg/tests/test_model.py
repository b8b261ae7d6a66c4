import math

import numpy as np
import pytest
from scipy.stats import chisquare

from tmr import autograd as ag
from tmr.gradcheck import check_gradients, per_example_grad_norms, relative_error
from tmr.model import (DiscriminatorOutput, ModelConfig, ModelParams, bce_from_probs, collate,
                       discriminator_loss, forward_discriminator, forward_generator,
                       generator_loss, pre_activation_grads, sample_replacements)
from tmr.verify import TOY, toy_setup


@pytest.fixture(scope="module")
def toy():
    return toy_setup(seed=1)


def disc_out(logits, is_original):
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    return DiscriminatorOutput(None, ag.Tensor(z), ag.sigmoid_np(z), np.ones(z.shape, bool),
                               np.atleast_2d(is_original).astype(np.int8))


class TestConfig:
    def test_generator_not_wider(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=10, gen_hidden=64, disc_hidden=32)

    def test_heads_divide_hidden(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=10, disc_hidden=30, disc_heads=4)

    def test_embedding_is_one_table(self, toy):
        params = toy[0]
        assert [k for k in params.names() if "embed" in k] == ["embed"]
        assert "embed" in params.discriminator_names()
        assert not any(k.startswith("gen.") for k in params.discriminator_names())


class TestGenerator:
    def test_rows_are_distributions(self, toy):
        params, masked, _, _ = toy
        out = forward_generator(params, masked)
        p = np.exp(out.log_probs.data)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
        assert out.log_probs.shape == (sum(len(m.mask_positions) for m in masked), TOY.vocab_size)

    def test_zero_output_path_is_uniform(self, toy):
        params, masked, _, _ = toy
        p = params.copy()
        p["gen.out_proj"].data[:] = 0.0
        p["gen.out_bias"].data[:] = 0.0
        out = forward_generator(p, masked)
        assert np.allclose(np.exp(out.log_probs.data), 1.0 / TOY.vocab_size, atol=1e-12)
        assert float(generator_loss(out).data) == pytest.approx(math.log(TOY.vocab_size), abs=1e-12)

    def test_matches_direct_softmax_oracle(self, toy):
        params, masked, _, _ = toy
        out = forward_generator(params, masked)
        hG = out.hidden.data[out.batch_index, out.positions]
        logits = hG @ params["embed"].data.T
        oracle = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        assert np.allclose(np.exp(out.log_probs.data), oracle, atol=1e-10)

    def test_softmax_shift_invariance(self):
        x = np.random.default_rng(0).normal(size=(4, 9))
        assert np.allclose(ag.softmax_np(x), ag.softmax_np(x + 123.0), atol=1e-12)

    def test_attention_rows_sum_to_one(self, toy):
        params, masked, _, _ = toy
        kept = []
        forward_generator(params, masked, keep_attn=kept)
        _, valid = collate([m.input for m in masked])
        for a in kept:
            assert np.allclose(a.sum(axis=-1), 1.0, atol=1e-9)
            # padded keys get no weight
            assert np.all(a[~np.broadcast_to(valid[:, None, None, :], a.shape)] < 1e-300)


class TestGeneratorLoss:
    def test_perfect_prediction_is_zero(self, toy):
        params, masked, _, _ = toy
        out = forward_generator(params, masked)
        lp = np.full(out.log_probs.shape, -1e3)
        lp[np.arange(len(lp)), out.targets] = 0.0
        fake = out._replace(log_probs=ag.Tensor(lp))
        assert float(generator_loss(fake).data) == 0.0

    def test_hand_case(self):
        from tmr.verify import formula_checks
        checks = {c.name: c for c in formula_checks()}
        assert checks["MLM hand case 1.0397"].passed
        assert checks["uniform MLM loss vs ln 100"].passed


class TestSampling:
    def test_degenerate_distribution(self, toy):
        params, masked, _, _ = toy
        out = forward_generator(params, masked)
        lp = np.full(out.log_probs.shape, -np.inf)
        lp[:, 7] = 0.0
        fake = out._replace(log_probs=ag.Tensor(lp))
        for seed in range(5):
            assert all(np.all(d == 7) for d in sample_replacements(fake, np.random.default_rng(seed)))

    def test_uniform_chi_square(self, toy):
        params, masked, _, _ = toy
        out = forward_generator(params, masked)
        V = TOY.vocab_size
        n = 100_000
        fake = out._replace(log_probs=ag.Tensor(np.full((n, V), -math.log(V))), counts=np.array([n]))
        draws = sample_replacements(fake, np.random.default_rng(3))[0]
        assert chisquare(np.bincount(draws, minlength=V)).pvalue > 0.01

    def test_seeded_reproducible(self, toy):
        params, masked, _, _ = toy
        out = forward_generator(params, masked)
        a = sample_replacements(out, np.random.default_rng(5))
        b = sample_replacements(out, np.random.default_rng(5))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


class TestDiscriminator:
    def test_zero_head_is_half(self, toy):
        params, _, corrupted, _ = toy
        p = params.copy()
        p["disc.head_w"].data[:] = 0.0
        d = forward_discriminator(p, corrupted)
        assert np.all(d.probs[d.valid] == 0.5)

    def test_scaling_head_moves_away_from_half(self, toy):
        params, _, corrupted, _ = toy
        d1 = forward_discriminator(params, corrupted)
        p = params.copy()
        p["disc.head_w"].data *= 3.0
        d3 = forward_discriminator(p, corrupted)
        assert np.all(np.abs(d3.probs - 0.5)[d1.valid] >= np.abs(d1.probs - 0.5)[d1.valid])

    def test_matches_sigmoid_oracle(self, toy):
        params, _, corrupted, _ = toy
        d = forward_discriminator(params, corrupted)
        z = d.hidden.data @ params["disc.head_w"].data
        assert np.allclose(d.probs, 1 / (1 + np.exp(-z)), atol=1e-12)
        assert np.all((d.probs > 0) & (d.probs < 1))

    def test_labels_follow_corruption(self, toy):
        _, _, corrupted, _ = toy
        d = forward_discriminator(toy[0], corrupted)
        for i, c in enumerate(corrupted):
            assert np.array_equal(d.is_original[i, : len(c)], (c.tokens == c.original.ids))
            assert not d.is_original[i, len(c):].any()


class TestDiscriminatorLoss:
    def test_single_token_ln2(self):
        loss, _ = discriminator_loss(disc_out([0.0], [1]))
        assert float(loss.data) == pytest.approx(math.log(2), abs=1e-12)

    def test_saturation(self):
        loss, _ = discriminator_loss(disc_out([20.0, -20.0], [1, 0]))
        assert float(loss.data) < 1e-6

    def test_hand_case(self):
        z = np.log(np.array([0.9, 0.2]) / np.array([0.1, 0.8]))
        loss, per = discriminator_loss(disc_out(z, [1, 0]))
        assert float(loss.data) == pytest.approx(0.16425, abs=1e-5)
        assert float(loss.data) == pytest.approx(bce_from_probs([0.9, 0.2], [1, 0]), abs=1e-12)

    def test_batch_is_mean_of_examples(self, toy):
        params, _, corrupted, _ = toy
        loss, per = discriminator_loss(forward_discriminator(params, corrupted))
        assert float(loss.data) == pytest.approx(per.data.mean(), abs=1e-15)

    def test_pre_activation_grads_match_autodiff(self, toy):
        params, _, corrupted, _ = toy
        with ag.Tape() as tape:
            d = forward_discriminator(params, corrupted)
            _, per = discriminator_loss(d)
            total = ag.sum_all(per)
        leaves = tape.gradients(total)
        # z is not a leaf; recover dL/dz through the head: dL/dw = sum_t g_t h_t
        g = pre_activation_grads(d)
        dw = np.einsum("bn,bnh->h", g, d.hidden.data)
        assert np.allclose(leaves[id(params["disc.head_w"])], dw, atol=1e-12)


class TestBackward:
    def test_backward_without_forward(self):
        t = ag.parameter(np.ones(2))
        with pytest.raises(RuntimeError):
            ag.Tape().gradients(t)

    def test_nan_names_scope(self):
        x = ag.parameter(np.array([1.0, -1.0]))
        with ag.Tape(), ag.scope("disc.l0"), pytest.raises(ag.NumericalError, match="disc.l0"):
            ag.mul(x, np.array([np.inf, 1.0]))

    def test_gradcheck_per_loss(self, toy):
        params, masked, corrupted, _ = toy
        for fn in (lambda: generator_loss(forward_generator(params, masked)),
                   lambda: ag.scale(discriminator_loss(forward_discriminator(params, corrupted))[0], 50.0)):
            rep = check_gradients(fn, params.params)
            assert max(e for e, _ in rep.values()) < 1e-4

    def test_disc_loss_never_reaches_generator(self, toy):
        params, _, corrupted, _ = toy
        with ag.Tape() as tape:
            loss, _ = discriminator_loss(forward_discriminator(params, corrupted))
        leaves = tape.gradients(loss)
        assert all(id(params[k]) not in leaves for k in params.generator_names())

    def test_shared_embedding_gradient_is_additive(self, toy):
        params, masked, corrupted, _ = toy

        def grad(use_g, use_d):
            with ag.Tape() as tape:
                parts = []
                if use_g:
                    parts.append(generator_loss(forward_generator(params, masked)))
                if use_d:
                    parts.append(ag.scale(discriminator_loss(forward_discriminator(params, corrupted))[0], 50.0))
                loss = parts[0] if len(parts) == 1 else ag.add(*parts)
            return tape.gradients(loss)[id(params["embed"])]

        assert np.allclose(grad(True, True), grad(True, False) + grad(False, True), atol=1e-12)

    def test_relative_error_floor(self):
        assert relative_error(np.zeros(3), np.full(3, 1e-12)) == pytest.approx(1e-4)
        assert relative_error(np.ones(3), np.ones(3)) == 0.0


class TestPerExampleNorms:
    def test_duplicates_identical(self, toy):
        params, _, corrupted, _ = toy
        norms, _ = per_example_grad_norms(params, [corrupted[0], corrupted[0]])
        assert norms[0] == norms[1]

    def test_mean_of_per_example_equals_batched(self, toy):
        params, _, corrupted, _ = toy
        _, grads = per_example_grad_norms(params, corrupted)
        with ag.Tape() as tape:
            loss, _ = discriminator_loss(forward_discriminator(params, corrupted))
        leaves = tape.gradients(loss)
        for name in params.discriminator_names():
            avg = sum(g[name] for g in grads) / len(grads)
            assert np.allclose(avg, leaves.get(id(params[name]), 0.0), atol=1e-9)

    def test_saturated_predictions_have_tiny_norm(self, toy):
        params, _, corrupted, _ = toy
        p = params.copy()
        # an all-original example with a huge positive bias through the head
        ex = corrupted[0]
        ex = type(ex)(ex.original.ids.copy(), ex.original, ex.mask_positions,
                      np.zeros(len(ex), dtype=np.int8))
        d = forward_discriminator(p, [ex])
        h = d.hidden.data[0]
        p["disc.head_w"].data[:] = 40.0 * np.linalg.lstsq(h, np.ones(len(h)), rcond=None)[0]
        norms, _ = per_example_grad_norms(p, [ex])
        assert norms[0] < 1e-6

    def test_counts_one_backward_per_example(self, toy):
        params, _, corrupted, _ = toy
        before = ag.COUNTERS["backward_calls"]
        per_example_grad_norms(params, corrupted)
        assert ag.COUNTERS["backward_calls"] - before == len(corrupted)


def test_params_init_deterministic():
    a = ModelParams.init(TOY, 3).arrays()
    b = ModelParams.init(TOY, 3).arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)
