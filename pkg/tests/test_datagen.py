import numpy as np
import pytest

from trajgpt import datagen
from trajgpt.errors import ContractViolation, DataFormatError


def two_state_spec(drift_rate=0.0, gap_rates=(1.0, 1.0)):
    return datagen.GeneratorSpec(
        vocab_size=3, latent_states=2,
        transition=np.array([[0.8, 0.2], [0.2, 0.8]]),
        emission=np.array([[0.7, 0.2, 0.1], [0.1, 0.2, 0.7]]),
        gap_rates=np.array(gap_rates), drift_rate=drift_rate, start_age=0.0)


class TestSpecContracts:
    def test_rows_must_be_stochastic(self):
        with pytest.raises(ContractViolation):
            datagen.GeneratorSpec(
                vocab_size=2, latent_states=2,
                transition=np.array([[0.9, 0.2], [0.2, 0.8]]),
                emission=np.full((2, 2), 0.5), gap_rates=np.ones(2))

    def test_rates_positive(self):
        with pytest.raises(ContractViolation):
            datagen.GeneratorSpec(
                vocab_size=2, latent_states=1, transition=np.ones((1, 1)),
                emission=np.full((1, 2), 0.5), gap_rates=np.zeros(1))

    def test_boost_codes_in_vocab(self):
        with pytest.raises(ContractViolation):
            datagen.GeneratorSpec(
                vocab_size=2, latent_states=1, transition=np.ones((1, 1)),
                emission=np.full((1, 2), 0.5), gap_rates=np.ones(1),
                boosts=[datagen.Boost(0, 5, 2.0)])


class TestDriftKernel:
    def test_identity_at_zero_gap(self):
        spec = two_state_spec(drift_rate=1.3)
        np.testing.assert_allclose(spec.drift_transition(0.0), np.eye(2), atol=1e-15)

    def test_closed_form_two_state(self):
        # pure-swap jump kernel: P(stay) = (1 + exp(-2 lam t)) / 2
        lam = 0.7
        spec = datagen.GeneratorSpec(
            vocab_size=2, latent_states=2,
            transition=np.array([[0.0, 1.0], [1.0, 0.0]]),
            emission=np.full((2, 2), 0.5), gap_rates=np.ones(2), drift_rate=lam)
        for gap in (0.3, 1.0, 4.0):
            stay = 0.5 * (1.0 + np.exp(-2 * lam * gap))
            expected = np.array([[stay, 1 - stay], [1 - stay, stay]])
            np.testing.assert_allclose(spec.drift_transition(gap), expected, atol=1e-10)

    def test_semigroup(self):
        spec = two_state_spec(drift_rate=0.9)
        p1 = spec.drift_transition(1.1)
        p2 = spec.drift_transition(2.2)
        np.testing.assert_allclose(p1 @ p1, p2, atol=1e-12)

    def test_observation_kernel_matches_quadrature(self):
        spec = two_state_spec(drift_rate=0.8, gap_rates=(0.5, 2.0))
        kernel = spec.observation_kernel()
        grid = np.linspace(0, 60, 6001)
        rows = np.array([spec.drift_transition(float(g)) for g in grid])
        for s, rate in enumerate(spec.gap_rates):
            pdf = rate * np.exp(-rate * grid)
            approx = np.trapezoid(pdf[:, None] * rows[:, s, :], grid, axis=0)
            np.testing.assert_allclose(kernel[s], approx / approx.sum(), atol=1e-4)


class TestGeneration:
    def test_determinism(self):
        spec = datagen.canonical_spec()
        a = datagen.generate_cohort(spec, 5, 10, 20, seed=3)
        b = datagen.generate_cohort(spec, 5, 10, 20, seed=3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.tokens, y.tokens)
            np.testing.assert_array_equal(x.times, y.times)
            assert x.labels == y.labels

    def test_degenerate_dynamics_constant_codes(self):
        spec = datagen.GeneratorSpec(
            vocab_size=4, latent_states=2, transition=np.eye(2),
            emission=np.array([[1.0, 0, 0, 0], [0, 0, 0, 1.0]]),
            gap_rates=np.ones(2), drift_rate=0.0)
        for seq in datagen.generate_cohort(spec, 6, 10, 15, seed=4):
            assert len(set(seq.tokens.tolist())) == 1

    def test_monotone_times_and_lengths(self):
        spec = datagen.canonical_spec()
        for seq in datagen.generate_cohort(spec, 8, 12, 30, seed=5):
            assert 12 <= len(seq) <= 30
            assert np.all(np.diff(seq.times) >= 0)
            assert seq.tokens.max() < spec.vocab_size

    def test_min_len_contract(self):
        with pytest.raises(ContractViolation):
            datagen.generate_cohort(datagen.canonical_spec(), 2, 1, 5, seed=0)

    def test_empirical_frequencies_match_stationary(self):
        # boost-free spec so the closed-form marginal applies exactly
        rng_spec = np.random.default_rng(6)
        emission = rng_spec.dirichlet(np.full(12, 0.8), size=3)
        spec = datagen.GeneratorSpec(
            vocab_size=12, latent_states=3,
            transition=np.array([[0.2, 0.5, 0.3], [0.4, 0.2, 0.4], [0.5, 0.3, 0.2]]),
            emission=emission, gap_rates=np.array([0.5, 1.0, 2.0]), drift_rate=1.2)
        cohort = datagen.generate_cohort(spec, 500, 200, 200, seed=7)
        counts = np.zeros(12)
        for seq in cohort:
            counts += np.bincount(seq.tokens, minlength=12)
        assert counts.sum() == 100000
        expected = datagen.marginal_code_frequencies(spec)
        assert np.abs(counts / counts.sum() - expected).max() < 0.01


class TestBayesOracle:
    def test_single_state_ignores_prefix(self):
        spec = datagen.GeneratorSpec(
            vocab_size=4, latent_states=1, transition=np.ones((1, 1)),
            emission=np.array([[0.4, 0.3, 0.2, 0.1]]), gap_rates=np.ones(1),
            start_age=0.0)
        a = datagen.IrregularSequence("a", [0, 1], [1.0, 2.0])
        b = datagen.IrregularSequence("b", [3, 3], [1.0, 2.0])
        np.testing.assert_array_equal(datagen.bayes_topk(a, spec, 3),
                                      datagen.bayes_topk(b, spec, 3))
        np.testing.assert_array_equal(datagen.bayes_topk(a, spec, 4), [0, 1, 2, 3])

    def test_point_mass_identity_chain(self):
        spec = datagen.GeneratorSpec(
            vocab_size=2, latent_states=2, transition=np.eye(2),
            emission=np.array([[1.0, 0.0], [0.0, 1.0]]),
            gap_rates=np.ones(2), drift_rate=0.0, start_age=0.0)
        seq = datagen.IrregularSequence("p", [1, 1], [0.5, 1.5])
        assert datagen.bayes_topk(seq, spec, 1)[0] == 1

    def test_hand_forward_algorithm(self):
        # code 0 observed once; equal gap rates make the gap uninformative
        spec = two_state_spec(drift_rate=0.0)
        seq = datagen.IrregularSequence("p", [0], [1.0])
        post = datagen.state_posterior(seq, spec)
        np.testing.assert_allclose(post, [0.875, 0.125], atol=1e-12)
        # frozen state (drift 0): predictive = posterior @ emission
        pred = datagen.bayes_predictive(seq, spec)
        expected = 0.875 * spec.emission[0] + 0.125 * spec.emission[1]
        np.testing.assert_allclose(pred, expected, atol=1e-12)
        np.testing.assert_array_equal(datagen.bayes_topk(seq, spec, 3), [0, 1, 2])

    def test_target_time_enumeration(self):
        # with drift, the predictive at t' enumerates both states through
        # the closed-form two-state transition
        lam = 0.6
        spec = two_state_spec(drift_rate=lam)
        spec.transition = np.array([[0.0, 1.0], [1.0, 0.0]])
        spec.__post_init__()
        seq = datagen.IrregularSequence("p", [0], [1.0])
        post = datagen.state_posterior(seq, spec)
        t_target = 3.0
        gap = 2.0
        w = post * np.exp(-gap)  # equal unit gap rates
        w = w / w.sum()
        stay = 0.5 * (1.0 + np.exp(-2 * lam * gap))
        p_states = np.array([w[0] * stay + w[1] * (1 - stay),
                             w[0] * (1 - stay) + w[1] * stay])
        expected = p_states @ spec.emission
        np.testing.assert_allclose(
            datagen.bayes_predictive(seq, spec, t_target), expected, atol=1e-10)

    def test_rank_ties_break_low(self):
        probs = np.array([0.2, 0.3, 0.3, 0.2])
        np.testing.assert_array_equal(datagen.rank_topk(probs, 4), [1, 2, 0, 3])
        with pytest.raises(ContractViolation):
            datagen.rank_topk(probs, 5)

    def test_oracle_not_beaten_by_simple_predictors(self):
        spec = datagen.canonical_spec()
        cohort = datagen.generate_cohort(spec, 160, 80, 100, seed=8)
        window, k, cap = 20, 5, 80
        marg_top = datagen.rank_topk(datagen.marginal_code_frequencies(spec), k)
        oracle_hits, marg_hits, recent_hits, n = 0, 0, 0, 0
        for seq in cohort:
            f = datagen.BayesFilter(spec)
            for x, t in zip(seq.tokens[:window], seq.times[:window]):
                f.absorb(int(x), float(t))
            for j in range(min(len(seq) - window, cap)):
                idx = window + j
                truth = int(seq.tokens[idx])
                t_next = float(seq.times[idx])
                oracle_hits += int(truth in datagen.rank_topk(
                    f.predictive(t_next), k))
                marg_hits += int(truth in marg_top)
                recent = seq.tokens[max(0, idx - k):idx][::-1]
                recent_hits += int(truth in recent)
                f.absorb(truth, t_next)
                n += 1
        assert n >= 10000
        oracle = oracle_hits / n
        sigma = np.sqrt(oracle * (1 - oracle) / n)
        assert marg_hits / n <= oracle + 3 * sigma
        assert recent_hits / n <= oracle + 3 * sigma


class TestLabels:
    def test_drug_start_window(self):
        spec = datagen.canonical_spec()
        b = spec.boosts[0]
        tokens = np.array([1, b.trigger, b.boosted, 5])
        times = np.array([1.0, 2.0, 2.3, 4.0])
        labels = datagen._apply_labels(spec, tokens, times, np.zeros(4, dtype=int))
        assert labels["drug_start"] is True
        assert labels["first_trigger_time"] == 2.0
        late = datagen._apply_labels(
            spec, tokens, np.array([1.0, 2.0, 3.9, 4.0]), np.zeros(4, dtype=int))
        assert late["drug_start"] is False

    def test_phenotype_case(self):
        spec = datagen.canonical_spec()
        states = np.array([0, spec.phenotype_state, 0])
        labels = datagen._apply_labels(spec, np.zeros(3, int), np.arange(3.0), states)
        assert labels["phenotype_case"] is True


class TestIO:
    def test_round_trip_lossless(self, tmp_path):
        spec = datagen.canonical_spec()
        cohort = datagen.generate_cohort(spec, 6, 10, 20, seed=9)
        path = tmp_path / "d.jsonl"
        datagen.write_dataset(cohort, path)
        back = datagen.read_dataset(path)
        assert len(back) == len(cohort)
        for a, b in zip(cohort, back):
            assert a.pid == b.pid
            np.testing.assert_array_equal(a.tokens, b.tokens)
            np.testing.assert_array_equal(a.times, b.times)  # bit-exact floats
            assert a.labels == b.labels

    def test_empty_file_is_empty_cohort(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert datagen.read_dataset(path) == []

    def test_hand_written_fixture(self, tmp_path):
        path = tmp_path / "two.jsonl"
        path.write_text(
            '{"id": "a", "tokens": [1, 2], "times": [0.25, 1.5], "labels": {}}\n'
            '{"id": "b", "tokens": [3], "times": [2.125], "labels": {"x": true}}\n')
        seqs = datagen.read_dataset(path)
        assert [s.pid for s in seqs] == ["a", "b"]
        np.testing.assert_array_equal(seqs[0].tokens, [1, 2])
        assert seqs[1].labels == {"x": True}

    def test_malformed_line_names_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "a", "tokens": [1], "times": [1.0]}\nnot json\n')
        with pytest.raises(DataFormatError, match="line 2"):
            datagen.read_dataset(path)

    def test_non_monotone_times_rejected(self, tmp_path):
        path = tmp_path / "mono.jsonl"
        path.write_text('{"id": "a", "tokens": [1, 2], "times": [2.0, 1.0]}\n')
        with pytest.raises(DataFormatError, match="line 1"):
            datagen.read_dataset(path)

    def test_spec_round_trip(self, tmp_path):
        spec = datagen.canonical_spec()
        path = tmp_path / "spec.json"
        datagen.save_spec(spec, path)
        back = datagen.load_spec(path)
        np.testing.assert_allclose(back.transition, spec.transition)
        np.testing.assert_allclose(back.emission, spec.emission)
        assert back.drift_rate == spec.drift_rate
        assert [(b.trigger, b.boosted) for b in back.boosts] == \
               [(b.trigger, b.boosted) for b in spec.boosts]


class TestSplit:
    def _cohort(self, n):
        return [datagen.IrregularSequence(f"p{i}", [0, 1], [0.0, 1.0])
                for i in range(n)]

    def test_all_train(self):
        train, valid, test = datagen.split(self._cohort(10), (1.0, 0.0, 0.0), seed=0)
        assert len(train) == 10 and not valid and not test

    def test_partition(self):
        cohort = self._cohort(37)
        train, valid, test = datagen.split(cohort, (0.8, 0.1, 0.1), seed=1)
        ids = [s.pid for s in train + valid + test]
        assert sorted(ids) == sorted(s.pid for s in cohort)
        assert len(set(ids)) == 37

    def test_exact_rounding(self):
        train, valid, test = datagen.split(self._cohort(1000), (0.8, 0.1, 0.1), seed=2)
        assert (len(train), len(valid), len(test)) == (800, 100, 100)

    def test_fraction_contract(self):
        with pytest.raises(ContractViolation):
            datagen.split(self._cohort(4), (0.5, 0.2, 0.2), seed=0)
