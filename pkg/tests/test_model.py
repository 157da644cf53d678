import numpy as np
import pytest

from trajgpt import checkpoint, model
from trajgpt.errors import (
    CheckpointMagicError,
    CheckpointPrecisionError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ContractViolation,
    NumericFailure,
)


def toy_cfg(**kw):
    base = dict(vocab_size=12, d=16, heads=2, layers=2, precision="single")
    base.update(kw)
    return model.ModelConfig(**base)


def random_sequence(rng, cfg, n):
    codes = rng.integers(0, cfg.n_codes, n)
    times = np.sort(rng.uniform(0, 8, n))
    return codes, times


class TestConfig:
    def test_contracts(self):
        with pytest.raises(ContractViolation):
            model.ModelConfig(vocab_size=1, d=8, heads=2, layers=1)
        with pytest.raises(ContractViolation):
            model.ModelConfig(vocab_size=10, d=9, heads=2, layers=1)
        with pytest.raises(ContractViolation):
            model.ModelConfig(vocab_size=10, d=8, heads=2, layers=1, fixed_gamma=0.0)

    def test_ff_default_and_json_round_trip(self):
        cfg = toy_cfg()
        assert cfg.ff_width == 2 * cfg.d
        again = model.ModelConfig.from_json(cfg.to_json())
        assert again == cfg
        assert again.config_hash() == cfg.config_hash()


class TestEmbed:
    def test_equal_ids_equal_rows(self):
        cfg = toy_cfg()
        params = model.init_params(cfg, seed=0)
        rows = model.embed_rows(params, [3, 7, 3], cfg)
        np.testing.assert_array_equal(rows[0], rows[2])

    def test_rows_finite_after_init(self):
        cfg = toy_cfg()
        params = model.init_params(cfg, seed=1)
        rows = model.embed_rows(params, np.arange(cfg.vocab_size), cfg)
        assert np.all(np.isfinite(np.linalg.norm(rows, axis=1)))

    def test_one_hot_table_gives_identity_rows(self):
        cfg = model.ModelConfig(vocab_size=3, d=3, heads=1, layers=1,
                                precision="double")
        params = model.init_params(cfg, seed=0)
        params["embed"] = np.eye(3)
        np.testing.assert_array_equal(
            model.embed_rows(params, [0, 1, 2], cfg), np.eye(3))

    def test_out_of_range_rejected(self):
        cfg = toy_cfg()
        params = model.init_params(cfg, seed=0)
        with pytest.raises(ContractViolation):
            model.embed_rows(params, [cfg.vocab_size], cfg)


class TestForward:
    @pytest.mark.parametrize("attention", ["sra", "softmax_gpt2"])
    def test_causality_probe(self, attention):
        cfg = toy_cfg(attention=attention,
                      positional="absolute" if attention == "softmax_gpt2" else "rope")
        params = model.init_params(cfg, seed=2)
        rng = np.random.default_rng(3)
        codes, times = random_sequence(rng, cfg, 9)
        ids, tin, _ = model.prepare_example(codes, times, cfg)
        base = model.forward(ids, tin, cfg, params)
        ids2 = ids.copy()
        ids2[5] = (ids2[5] % cfg.n_codes) + 1
        pert = model.forward(ids2, tin, cfg, params)
        np.testing.assert_array_equal(base[:5], pert[:5])
        assert np.abs(base[5:] - pert[5:]).max() > 0

    def test_single_token(self):
        cfg = toy_cfg()
        params = model.init_params(cfg, seed=4)
        logits = model.forward([3], [1.5], cfg, params)
        assert logits.shape == (1, cfg.vocab_size)
        assert np.all(np.isfinite(logits))

    @pytest.mark.parametrize("precision,tol", [("single", 1e-5), ("double", 1e-10)])
    def test_form_swap(self, precision, tol):
        cfg = toy_cfg(precision=precision)
        params = model.init_params(cfg, seed=5)
        rng = np.random.default_rng(6)
        codes, times = random_sequence(rng, cfg, 20)
        ids, tin, _ = model.prepare_example(codes, times, cfg)
        par = model.forward(ids, tin, cfg, params, form="parallel")
        rec = model.forward(ids, tin, cfg, params, form="recurrent")
        assert np.abs(par - rec).max() <= tol

    def test_decreasing_times_rejected(self):
        cfg = toy_cfg()
        params = model.init_params(cfg, seed=7)
        with pytest.raises(ContractViolation):
            model.forward([1, 2], [2.0, 1.0], cfg, params)

    def test_tied_output_head(self):
        cfg = toy_cfg(tie_output=True)
        params = model.init_params(cfg, seed=8)
        assert "head.w" not in params
        logits = model.forward([1, 2, 3], [0.0, 1.0, 2.0], cfg, params)
        assert logits.shape == (3, cfg.vocab_size)


class TestLoss:
    def test_uniform_entropy(self):
        logits = np.zeros((5, 194))
        targets = np.arange(5)
        assert model.nll_loss(logits, targets) == pytest.approx(np.log(194), abs=1e-9)

    def test_perfect_prediction_limit(self):
        logits = np.zeros((3, 7))
        targets = np.array([1, 4, 6])
        logits[np.arange(3), targets] = 1e4
        assert model.nll_loss(logits, targets) < 1e-12

    def test_two_class_hand_case(self):
        logits = np.array([[1.0, 0.0]])
        assert model.nll_loss(logits, [0]) == pytest.approx(np.log(1 + np.exp(-1)),
                                                            abs=1e-9)
        assert model.nll_loss(logits, [0]) == pytest.approx(0.3133, abs=1e-4)

    def test_length_mismatch(self):
        with pytest.raises(ContractViolation):
            model.nll_loss(np.zeros((3, 4)), [0, 1])

    def test_pad_exclusion(self):
        logits = np.zeros((4, 6))
        logits[:, 2] = 3.0
        full = model.nll_loss(logits, [2, 2, 5, 5], pad_id=5)
        assert full == pytest.approx(model.nll_loss(logits[:2], [2, 2]))


class TestTraining:
    def test_zero_learning_rate_is_noop(self):
        cfg = toy_cfg()
        params = model.init_params(cfg, seed=9)
        before = {k: v.copy() for k, v in params.items()}
        opt = model.init_opt_state(params)
        rng = np.random.default_rng(10)
        batch = [random_sequence(rng, cfg, 8) for _ in range(2)]
        model.train_step(params, opt, batch, cfg, model.TrainHyper(lr=0.0))
        for k in params:
            np.testing.assert_array_equal(params[k], before[k])

    def test_loss_decreases_on_learnable_data(self):
        from trajgpt import datagen
        spec = datagen.canonical_spec()
        cohort = datagen.generate_cohort(spec, 24, 20, 30, seed=11)
        data = [(s.tokens, s.times) for s in cohort]
        cfg = model.ModelConfig.for_codes(spec.vocab_size, d=16, heads=2, layers=1,
                                          precision="single")
        hp = model.TrainHyper(lr=2e-3, warmup=10, batch_size=4)
        _, _, losses = model.pretrain(cfg, data, 50, hp, seed=12)
        first = np.mean([l for _, l in losses[:10]])
        last = np.mean([l for _, l in losses[-10:]])
        assert last < first

    def test_overfit_single_sequence(self):
        cfg = model.ModelConfig(vocab_size=22, d=16, heads=2, layers=2,
                                precision="single")
        rng = np.random.default_rng(13)
        seq = (rng.integers(0, cfg.n_codes, 12), np.sort(rng.uniform(0, 6, 12)))
        params = model.init_params(cfg, seed=14)
        opt = model.init_opt_state(params)
        hp = model.TrainHyper(lr=1e-2, warmup=20, batch_size=1)
        for _ in range(500):
            loss = model.train_step(params, opt, [seq], cfg, hp)
        assert loss < 0.05

    def test_nan_loss_aborts_with_diagnostics(self):
        cfg = toy_cfg()
        params = model.init_params(cfg, seed=15)
        params["embed"][0, 0] = np.nan
        opt = model.init_opt_state(params)
        rng = np.random.default_rng(16)
        with pytest.raises(NumericFailure, match="layer"):
            model.train_step(params, opt, [random_sequence(rng, cfg, 6)], cfg,
                             model.TrainHyper())

    def test_padding_mask_matches_per_sequence_loss(self):
        cfg = toy_cfg(precision="double")
        params = model.init_params(cfg, seed=17)
        rng = np.random.default_rng(18)
        seqs = [random_sequence(rng, cfg, n) for n in (5, 9)]
        pooled, _ = model.loss_and_grads(params, seqs, cfg)
        total, count = 0.0, 0
        for codes, times in seqs:
            ids, tin, targets = model.prepare_example(codes, times, cfg)
            logits = model.forward(ids, tin, cfg, params)
            total += model.nll_loss(logits[:-1], targets) * len(targets)
            count += len(targets)
        assert pooled == pytest.approx(total / count, rel=1e-12)


class TestDeterminism:
    def _train_bytes(self, tmp_path, steps, tag, resume_at=None):
        from trajgpt import datagen
        spec = datagen.canonical_spec()
        cohort = datagen.generate_cohort(spec, 12, 10, 16, seed=19)
        data = [(s.tokens, s.times) for s in cohort]
        cfg = model.ModelConfig.for_codes(spec.vocab_size, d=16, heads=2, layers=1,
                                          precision="single")
        hp = model.TrainHyper(lr=1e-3, warmup=5, batch_size=4)
        path = tmp_path / f"{tag}.ckpt"
        if resume_at is None:
            params, opt, _ = model.pretrain(cfg, data, steps, hp, seed=20)
        else:
            params, opt, _ = model.pretrain(cfg, data, resume_at, hp, seed=20)
            checkpoint.save_checkpoint(path, cfg, params, opt.step, 20, opt)
            cfg, params, meta, opt = checkpoint.load_checkpoint(path)
            params, opt, _ = model.pretrain(cfg, data, steps - resume_at, hp,
                                            seed=meta["seed"], params=params, opt=opt)
        checkpoint.save_checkpoint(path, cfg, params, opt.step, 20, opt)
        return path.read_bytes()

    def test_same_seed_bit_identical(self, tmp_path):
        a = self._train_bytes(tmp_path, 12, "a")
        b = self._train_bytes(tmp_path, 12, "b")
        assert a == b

    def test_resume_bit_identical(self, tmp_path):
        whole = self._train_bytes(tmp_path, 12, "whole")
        split = self._train_bytes(tmp_path, 12, "split", resume_at=6)
        assert whole == split


class TestCheckpoint:
    def _setup(self, tmp_path, precision="single"):
        cfg = toy_cfg(precision=precision)
        params = model.init_params(cfg, seed=21)
        path = tmp_path / "m.ckpt"
        checkpoint.save_checkpoint(path, cfg, params, step=3, seed=21)
        return cfg, params, path

    def test_round_trip_forward_bit_identical(self, tmp_path):
        cfg, params, path = self._setup(tmp_path)
        cfg2, params2, meta, _ = checkpoint.load_checkpoint(path)
        assert meta["step"] == 3 and meta["seed"] == 21
        rng = np.random.default_rng(22)
        codes, times = random_sequence(rng, cfg, 7)
        ids, tin, _ = model.prepare_example(codes, times, cfg)
        np.testing.assert_array_equal(model.forward(ids, tin, cfg, params),
                                      model.forward(ids, tin, cfg2, params2))

    def test_byte_exact_resave(self, tmp_path):
        cfg, params, path = self._setup(tmp_path)
        cfg2, params2, meta, _ = checkpoint.load_checkpoint(path)
        path2 = tmp_path / "m2.ckpt"
        checkpoint.save_checkpoint(path2, cfg2, params2, meta["step"], meta["seed"])
        assert path.read_bytes() == path2.read_bytes()

    def test_corrupted_magic_rejected(self, tmp_path):
        _, _, path = self._setup(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointMagicError):
            checkpoint.load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        _, _, path = self._setup(tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 40])
        with pytest.raises(CheckpointTruncatedError):
            checkpoint.load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path):
        _, _, path = self._setup(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            checkpoint.load_checkpoint(path)

    def test_cross_precision_load_rejected(self, tmp_path):
        _, _, path = self._setup(tmp_path, precision="double")
        with pytest.raises(CheckpointPrecisionError):
            checkpoint.load_checkpoint(path, expected_precision="single")
        cfg, _, _, _ = checkpoint.load_checkpoint(path, expected_precision="double")
        assert cfg.precision == "double"

    def test_optimizer_state_round_trip(self, tmp_path):
        cfg = toy_cfg()
        params = model.init_params(cfg, seed=23)
        opt = model.init_opt_state(params)
        opt.step = 5
        opt.m["embed"] += 0.25
        path = tmp_path / "opt.ckpt"
        checkpoint.save_checkpoint(path, cfg, params, 5, 23, opt)
        _, _, meta, opt2 = checkpoint.load_checkpoint(path)
        assert meta["has_opt"] and opt2.step == 5
        np.testing.assert_array_equal(opt2.m["embed"], opt.m["embed"])
