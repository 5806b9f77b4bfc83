import numpy as np
import pytest

from discgen import tensor as T
from discgen.baselines import build_model
from discgen.env import EnvConfig, generate_dataset
from discgen.errors import ConfigError, ContractError
from discgen.hypernet import HypernetConfig
from discgen.lang import build_lexicon, id_to_instruction
from discgen.models import DiscModel
from discgen.policy import PolicyArch
from discgen.trainer import Batch, bc_loss, sample_batch, train, write_loss_curve


@pytest.fixture(scope="module")
def lex():
    return build_lexicon(d_lang=16, seed=0)


@pytest.fixture(scope="module")
def ds(lex):
    return generate_dataset(EnvConfig(), lex, n_demos=4, seed=5)


@pytest.fixture(scope="module")
def hn_cfg():
    return HypernetConfig(arch=PolicyArch((27, 8, 8, 3)), d_lang=16, d=16,
                          heads=2, win_blocks=1, refine_steps=1)


class TestSampling:
    def test_uniform_over_transitions(self, ds, lex):
        # chi-square-style bound: relative frequency of each task matches its
        # share of the transition list over many draws
        rng = np.random.default_rng(0)
        counts = np.zeros(len(ds.tasks))
        draws = 400
        for _ in range(draws):
            b = sample_batch(ds, lex, 64, rng)
            for instr, idx in b.groups:
                ti = instr.task[0] * 3 + instr.task[1]
                counts[ti] += len(idx)
        freq = counts / counts.sum()
        expect = np.bincount(ds.task_idx, minlength=9) / len(ds)
        np.testing.assert_allclose(freq, expect, atol=0.01)

    def test_task_subset_marginal_uniformity(self, ds, lex):
        # with tasks_per_batch, per-step batches cover few tasks but the
        # marginal transition distribution stays proportional
        rng = np.random.default_rng(1)
        counts = np.zeros(len(ds.tasks))
        for _ in range(600):
            b = sample_batch(ds, lex, 64, rng, tasks_per_batch=3)
            assert len({i.task for i, _ in b.groups}) <= 3
            for instr, idx in b.groups:
                counts[instr.task[0] * 3 + instr.task[1]] += len(idx)
        freq = counts / counts.sum()
        expect = np.bincount(ds.task_idx, minlength=9) / len(ds)
        # batches are clustered on 3 tasks, so the effective sample count is
        # the number of groups, not transitions: allow ~3 sigma
        np.testing.assert_allclose(freq, expect, atol=0.025)

    def test_rows_partition_batch(self, ds, lex):
        b = sample_batch(ds, lex, 32, np.random.default_rng(2))
        all_rows = np.sort(np.concatenate([idx for _, idx in b.groups]))
        np.testing.assert_array_equal(all_rows, np.arange(32))

    def test_paraphrase_redraw_changes_surfaces(self, ds, lex):
        rng = np.random.default_rng(3)
        seen = set()
        for _ in range(30):
            b = sample_batch(ds, lex, 64, rng, paraphrase=True)
            for instr, _ in b.groups:
                if instr.task == (0, 0):
                    seen.add(instr.surface_ids)
        assert len(seen) > 5  # many distinct surface forms for one task

    def test_no_paraphrase_uses_stored_codes(self, ds, lex):
        from discgen.lang import instruction_to_id
        rng = np.random.default_rng(4)
        for _ in range(10):
            b = sample_batch(ds, lex, 64, rng, paraphrase=False)
            for instr, idx in b.groups:
                ti = instr.task[0] * 3 + instr.task[1]
                code = instruction_to_id(lex, instr)
                stored = set(ds.surface[ds.task_idx == ti].tolist())
                # groups are keyed by codes that exist in the dataset for
                # exactly that task
                assert code in stored

    def test_identical_rng_identical_batches(self, ds, lex):
        b1 = sample_batch(ds, lex, 32, np.random.default_rng(9))
        b2 = sample_batch(ds, lex, 32, np.random.default_rng(9))
        assert np.array_equal(b1.obs, b2.obs)
        assert [i.surface_ids for i, _ in b1.groups] == \
               [i.surface_ids for i, _ in b2.groups]

    def test_empty_dataset_rejected(self, ds, lex):
        import dataclasses
        empty = dataclasses.replace(ds, obs=ds.obs[:0], act=ds.act[:0],
                                    task_idx=ds.task_idx[:0], surface=ds.surface[:0],
                                    episode=ds.episode[:0], t=ds.t[:0])
        with pytest.raises(ContractError):
            sample_batch(empty, lex, 8, np.random.default_rng(0))


class TestLossOracles:
    def test_hand_computed_two_sample_loss(self, lex):
        # constant-zero policy: loss = mean of squared action entries
        class ZeroModel:
            params = {}
            def loss_on_batch(self, batch, lex):
                return T.mse(T.Tensor(np.zeros_like(batch.act)), T.Tensor(batch.act))
            def clear_cache(self):
                pass
        act = np.array([[0.05, -0.05, 1.0], [0.0, 0.02, -1.0]])
        batch = Batch(obs=np.zeros((2, 27)), act=act, groups=[])
        loss = bc_loss(batch, ZeroModel(), lex)
        assert loss.item() == pytest.approx(np.mean(act ** 2), abs=1e-15)

    def test_nonfinite_loss_rejected(self, lex):
        class NanModel:
            params = {}
            def loss_on_batch(self, batch, lex):
                return T.Tensor(np.array([[np.nan]]))
            def clear_cache(self):
                pass
        batch = Batch(obs=np.zeros((1, 27)), act=np.zeros((1, 3)), groups=[])
        with pytest.raises(ContractError):
            bc_loss(batch, NanModel(), lex)


class TestTrainingLoop:
    def test_short_run_decreases_loss(self, ds, lex, hn_cfg):
        model = build_model("concat-mlp", hn_cfg, lex, 27, 3, np.random.default_rng(0))
        res = train(model, ds, lex, steps=60, lr=3e-3, batch_size=64, seed=0)
        assert res.losses[-10:].mean() < res.losses[:10].mean()

    def test_gradient_reaches_both_stages_early(self, ds, lex, hn_cfg):
        model = DiscModel(hn_cfg, np.random.default_rng(1))
        res = train(model, ds, lex, steps=10, lr=1e-4, batch_size=16, seed=1)
        hit = res.grad_reached
        assert any(n.startswith("win.") for n in hit)
        assert any(n.startswith("ref.") for n in hit)
        # zero-initialized meta decoders still receive gradient at step 0
        assert min(s for n, s in hit.items() if n.startswith("ref.dec")) == 0

    def test_bit_identical_reruns(self, ds, lex, hn_cfg, tmp_path):
        def run(out):
            model = build_model("concat-mlp", hn_cfg, lex, 27, 3,
                                np.random.default_rng(2))
            train(model, ds, lex, steps=25, lr=1e-3, batch_size=32, seed=7,
                  out_dir=out, checkpoint_every=0)
            return (out / "final.bin").read_bytes()
        b1 = run(tmp_path / "a")
        b2 = run(tmp_path / "b")
        assert b1 == b2

    def test_checkpoints_written(self, ds, lex, hn_cfg, tmp_path):
        model = build_model("concat-mlp", hn_cfg, lex, 27, 3, np.random.default_rng(3))
        train(model, ds, lex, steps=20, lr=1e-3, batch_size=16, seed=0,
              out_dir=tmp_path, checkpoint_every=10)
        assert (tmp_path / "checkpoint_000010.bin").exists()
        assert (tmp_path / "checkpoint_000020.bin").exists()
        assert (tmp_path / "final.bin").exists()
        assert (tmp_path / "loss_curve.csv").exists()

    def test_loss_curve_format(self, tmp_path):
        path = tmp_path / "curve.csv"
        write_loss_curve(path, np.array([1.0, 0.5]), np.array([1e-4, 5e-5]), seed=3)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("#") and "seed=3" in lines[0]
        assert lines[1] == "step,lr,loss"
        assert lines[2].split(",")[0] == "0"

    def test_nonpositive_steps(self, ds, lex, hn_cfg):
        model = build_model("concat-mlp", hn_cfg, lex, 27, 3, np.random.default_rng(4))
        with pytest.raises(ConfigError):
            train(model, ds, lex, steps=0)
