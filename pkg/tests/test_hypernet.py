import numpy as np
import pytest

from discgen import hypernet as H
from discgen import tensor as T
from discgen.errors import ConfigError
from discgen.lang import build_lexicon, encode_instruction, sample_instruction
from discgen.policy import PolicyArch, param_count


def tiny_cfg(refine_steps=1, arch=None):
    return H.HypernetConfig(arch=arch or PolicyArch((3, 4, 2)), d_lang=6, d=8,
                            heads=2, win_blocks=1, refine_steps=refine_steps)


@pytest.fixture(scope="module")
def tiny_lex():
    return build_lexicon(d_lang=6, seed=1)


def embed(lex, task=(0, 0), seed=0):
    instr = sample_instruction(lex, task, "train", np.random.default_rng(seed))
    return encode_instruction(instr, lex)


class TestConfig:
    def test_full_scale_defaults(self):
        cfg = H.HypernetConfig(arch=PolicyArch((27, 32, 32, 32, 3)))
        assert cfg.d == 128
        assert cfg.heads == 4
        assert cfg.attn_layers_per_block == 1
        assert cfg.win_blocks == 4
        assert cfg.refine_steps == 3

    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            H.HypernetConfig(arch=PolicyArch((3, 4, 2)), d=10, heads=4)

    def test_tau0_token_count(self):
        cfg = tiny_cfg()
        assert cfg.tau0_tokens == 3  # one per observation dimension


class TestTokenBookkeeping:
    def test_parameter_tokens_per_layer(self, tiny_lex):
        # one token per affine row of each layer: [3,4,2] -> 4 and 2 rows
        cfg = tiny_cfg()
        rng = np.random.default_rng(0)
        p = H.init_refine_params(cfg, rng)
        theta = np.zeros(param_count(cfg.arch))
        omegas = H.tokenize_params(theta, p, cfg)
        assert [o.shape for o in omegas] == [(4, cfg.d), (2, cfg.d)]

    def test_activation_token_chain(self, tiny_lex):
        cfg = tiny_cfg()
        rng = np.random.default_rng(0)
        p = H.init_refine_params(cfg, rng)
        omegas = H.tokenize_params(np.zeros(param_count(cfg.arch)), p, cfg)
        taus = H.forward_simulate(omegas, embed(tiny_lex), p, cfg)
        # tau_0 has one token per obs dim; tau_i inherits layer i's row count
        assert [t.shape[0] for t in taus] == [3, 4, 2]

    def test_pseudo_gradient_counts_match_rows(self, tiny_lex):
        cfg = tiny_cfg()
        rng = np.random.default_rng(0)
        p = H.init_refine_params(cfg, rng)
        omegas = H.tokenize_params(np.zeros(param_count(cfg.arch)), p, cfg)
        taus = H.forward_simulate(omegas, embed(tiny_lex), p, cfg)
        grads = H.backward_simulate(omegas, taus, embed(tiny_lex), p, cfg)
        assert [g.shape for g in grads] == [(4, cfg.d), (2, cfg.d)]

    def test_batched_equals_single(self, tiny_lex):
        cfg = tiny_cfg(refine_steps=2)
        rng = np.random.default_rng(1)
        p = H.init_hypernet_params(cfg, rng)
        for name, t in p.items():  # break zero-init so refinement is active
            if ".w2" in name:
                t.data = t.data + 0.03 * rng.standard_normal(t.data.shape)
        embs = [embed(tiny_lex, (0, 0), 1), embed(tiny_lex, (1, 2), 2),
                embed(tiny_lex, (2, 1), 3)]
        batched = H.generate_policy_batch(p, cfg, embs).data
        for b, e in enumerate(embs):
            single = H.generate_policy(e, p, cfg)
            np.testing.assert_allclose(batched[b], single, atol=1e-10)


class TestZeroInitIdentity:
    def test_refinement_is_identity_before_training(self, tiny_lex):
        # meta decoders start zero-initialized: full generation == WIN output
        cfg = tiny_cfg(refine_steps=3)
        rng = np.random.default_rng(2)
        p = H.init_hypernet_params(cfg, rng)
        e = embed(tiny_lex)
        full = H.generate_policy(e, p, cfg)
        win = H.win_generate(e, p, cfg)
        np.testing.assert_array_equal(full, win)

    def test_single_step_delta_zero(self, tiny_lex):
        cfg = tiny_cfg()
        rng = np.random.default_rng(3)
        p = H.init_refine_params(cfg, rng)
        theta = rng.standard_normal(param_count(cfg.arch))
        np.testing.assert_array_equal(H.refine_step(theta, embed(tiny_lex), p, cfg),
                                      theta)

    def test_t0_equals_win_only(self, tiny_lex):
        # refine_steps=0 bypasses stage 2 entirely
        cfg0 = tiny_cfg(refine_steps=0)
        rng = np.random.default_rng(4)
        p = H.init_hypernet_params(tiny_cfg(refine_steps=3), rng)
        e = embed(tiny_lex)
        np.testing.assert_array_equal(H.generate_policy(e, p, cfg0),
                                      H.win_generate(e, p, cfg0))


class TestDeterminismAndConditioning:
    def test_generation_deterministic(self, tiny_lex):
        cfg = tiny_cfg()
        p = H.init_hypernet_params(cfg, np.random.default_rng(5))
        e = embed(tiny_lex)
        np.testing.assert_array_equal(H.generate_policy(e, p, cfg),
                                      H.generate_policy(e, p, cfg))

    def test_different_instructions_differ(self, tiny_lex):
        cfg = tiny_cfg()
        p = H.init_hypernet_params(cfg, np.random.default_rng(6))
        t1 = H.generate_policy(embed(tiny_lex, (0, 0), 1), p, cfg)
        t2 = H.generate_policy(embed(tiny_lex, (2, 2), 2), p, cfg)
        assert not np.allclose(t1, t2)

    def test_output_length_matches_layout(self, tiny_lex):
        arch = PolicyArch((5, 7, 4, 2))
        cfg = tiny_cfg(arch=arch)
        p = H.init_hypernet_params(cfg, np.random.default_rng(7))
        out = H.generate_policy(embed(tiny_lex), p, cfg)
        assert out.shape == (param_count(arch),)


class TestGradientsThroughGenerator:
    def test_meta_update_grad_check(self, tiny_lex):
        cfg = tiny_cfg()
        rng = np.random.default_rng(8)
        p = H.init_refine_params(cfg, rng)
        grads_tok = [T.Tensor(rng.standard_normal((r, cfg.d)))
                     for r, _ in cfg.arch.layer_shapes()]
        names = [n for n in p if n.startswith("ref.dec0")]

        def f(*tensors):
            q = dict(p)
            for n, t in zip(names, tensors):
                q[n] = t
            return T.mean(H.meta_update_batch(q, cfg, grads_tok, 1))

        err = T.grad_check(f, [T.Tensor(p[n].data.copy()) for n in names])
        assert err < 1e-5

    def test_end_to_end_pipeline_grad(self):
        from discgen.gradcheck import check_pipeline, PIPELINE_THRESHOLD
        assert check_pipeline() < PIPELINE_THRESHOLD

    def test_loss_reaches_both_stages(self, tiny_lex):
        # one backward pass from a BC-style loss touches WIN and refinement
        cfg = tiny_cfg()
        rng = np.random.default_rng(9)
        p = H.init_hypernet_params(cfg, rng)
        for name, t in p.items():
            if ".w2" in name:
                t.data = t.data + 0.03 * rng.standard_normal(t.data.shape)
        theta = H.generate_policy_batch(p, cfg, [embed(tiny_lex)])
        from discgen.policy import policy_forward
        pred = policy_forward(T.Tensor(rng.standard_normal((4, 3))), theta, cfg.arch)
        loss = T.mse(pred, T.Tensor(rng.standard_normal((4, 2))))
        T.backward(loss)
        win_hit = any(p[n].grad is not None and np.any(p[n].grad != 0)
                      for n in p if n.startswith("win."))
        ref_hit = any(p[n].grad is not None and np.any(p[n].grad != 0)
                      for n in p if n.startswith("ref."))
        assert win_hit and ref_hit
