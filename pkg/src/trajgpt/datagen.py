"""Synthetic irregular event-sequence generator with an exact Bayes oracle.

A latent disease-cluster state drifts in continuous time (a Markov jump
process with kernel ``transition`` and rate ``drift_rate``) and emits a
code through per-state categorical distributions whenever an observation
occurs. Inter-observation gaps are exponential with state-specific
rates, and configured comorbidity boosts multiply a target code's
emission probability with an exponential time decay after each trigger
occurrence. Every mechanism is observable or exactly filterable, so the
forward algorithm yields the exact posterior next-code distribution, an
upper bound for any trained predictor; the longer the silence before a
query time, the more the exact predictive flattens toward its long-run
distribution, which is what time-aware inference can exploit.
"""

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractViolation, DataFormatError

SPEC_VERSION = 1


@dataclass
class Boost:
    """After each ``trigger`` emission, multiply ``boosted``'s emission
    probability by 1 + (multiplier - 1) * exp(-decay * elapsed)."""

    trigger: int
    boosted: int
    multiplier: float

    def __post_init__(self):
        if self.multiplier <= 0:
            raise ContractViolation("Boost: multiplier must be positive")


@dataclass
class GeneratorSpec:
    vocab_size: int
    latent_states: int
    transition: np.ndarray          # (S, S) row-stochastic jump kernel
    emission: np.ndarray            # (S, V) rows sum to 1, strictly positive
    gap_rates: np.ndarray           # (S,) exponential rates, events per year
    boosts: list = field(default_factory=list)
    boost_decay: float = 1.0        # per-year decay of the boost surplus
    drift_rate: float = 0.0         # latent jump intensity per year (0 = frozen state)
    start_age: float = 40.0
    phenotype_state: int = 0        # latent state defining the phenotype label
    drug_window: float = 0.5        # years for the drug-start label

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.emission = np.asarray(self.emission, dtype=np.float64)
        self.gap_rates = np.asarray(self.gap_rates, dtype=np.float64)
        s, v = self.latent_states, self.vocab_size
        if self.transition.shape != (s, s):
            raise ContractViolation("GeneratorSpec: transition must be (states, states)")
        if self.emission.shape != (s, v):
            raise ContractViolation("GeneratorSpec: emission must be (states, vocab)")
        if np.any(np.abs(self.transition.sum(axis=1) - 1.0) > 1e-9):
            raise ContractViolation("GeneratorSpec: transition rows must sum to 1")
        if np.any(np.abs(self.emission.sum(axis=1) - 1.0) > 1e-9):
            raise ContractViolation("GeneratorSpec: emission rows must sum to 1")
        if np.any(self.transition < 0) or np.any(self.emission < 0):
            raise ContractViolation("GeneratorSpec: probabilities must be non-negative")
        if np.any(self.gap_rates <= 0):
            raise ContractViolation("GeneratorSpec: gap rates must be positive")
        if self.drift_rate < 0:
            raise ContractViolation("GeneratorSpec: drift_rate must be non-negative")
        self.boosts = [b if isinstance(b, Boost) else Boost(*b) for b in self.boosts]
        for b in self.boosts:
            if not (0 <= b.trigger < v and 0 <= b.boosted < v):
                raise ContractViolation("GeneratorSpec: boost codes outside vocabulary")
        self._drift = _DriftKernel(self.transition, self.drift_rate)

    def drift_transition(self, gap: float) -> np.ndarray:
        """State-transition matrix over a silent gap of ``gap`` years."""
        return self._drift.transition(gap)

    def observation_kernel(self) -> np.ndarray:
        """Exact state kernel between consecutive observations.

        Marginalizes the state-dependent exponential gap against the
        continuous drift: M[s, s'] = E_gap[ P(gap)[s, s'] ], computed in
        closed form through the resolvent of the jump generator.
        """
        return self._drift.resolvent_kernel(self.gap_rates)


class _DriftKernel:
    """Uniformized Markov jump process: exp(rate * (U - I) * t) and friends."""

    def __init__(self, u_matrix: np.ndarray, rate: float):
        self.u = u_matrix
        self.rate = rate
        self._powers = [np.eye(u_matrix.shape[0])]

    def _power(self, k: int) -> np.ndarray:
        while len(self._powers) <= k:
            self._powers.append(self._powers[-1] @ self.u)
        return self._powers[k]

    def transition(self, gap: float) -> np.ndarray:
        if gap < 0:
            raise ContractViolation("drift transition: gap must be non-negative")
        lam = self.rate * gap
        if lam == 0.0:
            return self._powers[0]
        k_max = int(lam + 12.0 * np.sqrt(lam + 1.0) + 25.0)
        out = np.zeros_like(self.u)
        w = np.exp(-lam)
        total = 0.0
        for k in range(k_max + 1):
            out += w * self._power(k)
            total += w
            w *= lam / (k + 1)
        return out / total  # renormalize the truncated Poisson tail away

    def resolvent_kernel(self, gap_rates: np.ndarray) -> np.ndarray:
        """Rows of E_gap[exp(Q gap)] for gap ~ Exp(gap_rates[s]) per state s."""
        s_count = self.u.shape[0]
        q = self.rate * (self.u - np.eye(s_count))
        out = np.empty((s_count, s_count))
        for s in range(s_count):
            r = gap_rates[s]
            out[s] = r * np.linalg.solve(r * np.eye(s_count) - q.T, np.eye(s_count)[s])
        return out


@dataclass
class IrregularSequence:
    """Ordered (code, timestamp) pairs for one synthetic patient."""

    pid: str
    tokens: np.ndarray
    times: np.ndarray
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.tokens.shape[0] != self.times.shape[0]:
            raise ContractViolation("IrregularSequence: tokens and times length mismatch")
        if self.times.size and np.any(np.diff(self.times) < 0):
            raise ContractViolation("IrregularSequence: times must be non-decreasing")

    def __len__(self):
        return int(self.tokens.shape[0])


def _boost_multipliers(spec: GeneratorSpec, t: float, last_trigger: dict) -> dict:
    mult = {}
    for b in spec.boosts:
        t0 = last_trigger.get(b.trigger)
        if t0 is None:
            continue
        eff = 1.0 + (b.multiplier - 1.0) * np.exp(-spec.boost_decay * (t - t0))
        mult[b.boosted] = mult.get(b.boosted, 1.0) * eff
    return mult


def boosted_emission(spec: GeneratorSpec, t: float, last_trigger: dict) -> np.ndarray:
    """Emission matrix at time t given the trigger history (rows renormalized)."""
    em = spec.emission
    mult = _boost_multipliers(spec, t, last_trigger)
    if not mult:
        return em
    em = em.copy()
    for code, m in mult.items():
        em[:, code] *= m
    return em / em.sum(axis=1, keepdims=True)


def _apply_labels(spec: GeneratorSpec, tokens, times, states) -> dict:
    labels = {"phenotype_case": bool(np.any(states == spec.phenotype_state))}
    if spec.boosts:
        b = spec.boosts[0]
        trig_idx = np.nonzero(tokens == b.trigger)[0]
        if trig_idx.size:
            t0 = float(times[trig_idx[0]])
            labels["first_trigger_time"] = t0
            hits = (tokens == b.boosted) & (times > t0) & (times <= t0 + spec.drug_window)
            labels["drug_start"] = bool(hits.any())
        else:
            labels["first_trigger_time"] = None
            labels["drug_start"] = False
    return labels


def generate_patient(spec: GeneratorSpec, rng: np.random.Generator,
                     length: int, pid: str) -> IrregularSequence:
    """One patient: the latent state drifts over each silent gap, then emits.

    The gap hazard is set by the state at the previous observation; the
    state then drifts for the sampled gap before the next code is drawn.
    """
    s = int(rng.integers(spec.latent_states))  # state at start_age
    tokens = np.empty(length, dtype=np.int64)
    times = np.empty(length, dtype=np.float64)
    states = np.empty(length, dtype=np.int64)
    last_trigger = {}
    t = spec.start_age
    codes = np.arange(spec.vocab_size)
    triggers = {b.trigger for b in spec.boosts}
    for n in range(length):
        gap = rng.exponential(1.0 / spec.gap_rates[s])
        t += gap
        s = int(rng.choice(spec.latent_states, p=spec.drift_transition(gap)[s]))
        probs = boosted_emission(spec, t, last_trigger)[s]
        x = int(rng.choice(codes, p=probs))
        tokens[n] = x
        times[n] = t
        states[n] = s
        if x in triggers:
            last_trigger[x] = t
    labels = _apply_labels(spec, tokens, times, states)
    return IrregularSequence(pid, tokens, times, labels)


def generate_cohort(spec: GeneratorSpec, n_patients: int, min_len: int,
                    max_len: int, seed: int) -> list:
    """Deterministic cohort; each patient uses a seed derived from its index."""
    if min_len < 2:
        raise ContractViolation("generate_cohort: min_len must be at least 2")
    if max_len < min_len:
        raise ContractViolation("generate_cohort: max_len below min_len")
    cohort = []
    for i in range(n_patients):
        rng = np.random.default_rng([seed, 2, i])
        length = int(rng.integers(min_len, max_len + 1))
        cohort.append(generate_patient(spec, rng, length, pid=f"p{i:05d}"))
    return cohort


# ---------------------------------------------------------------------------
# Exact posterior oracle


class BayesFilter:
    """Incremental forward algorithm over the drifting latent state.

    Conditions on codes, inter-observation gaps (whose hazard reveals the
    previous state), the continuous drift over each gap, and the
    (observable) trigger history. absorb() costs O(states^2) plus the
    uniformized drift sum per observation.
    """

    def __init__(self, spec: GeneratorSpec):
        self.spec = spec
        self.alpha = np.full(spec.latent_states, 1.0 / spec.latent_states)
        self.last_trigger = {}
        self._triggers = {b.trigger for b in spec.boosts}
        self.prev_t = spec.start_age
        self.count = 0

    def absorb(self, x: int, t: float):
        spec = self.spec
        gap = t - self.prev_t
        if gap < 0:
            raise ContractViolation(
                "bayes filter: observation precedes the previous one "
                "(or the spec's start_age)")
        gap_lik = spec.gap_rates * np.exp(-spec.gap_rates * gap)
        em = boosted_emission(spec, t, self.last_trigger)
        alpha = ((self.alpha * gap_lik) @ spec.drift_transition(gap)) * em[:, x]
        total = alpha.sum()
        if total <= 0:
            raise ContractViolation("bayes filter: zero-probability prefix")
        self.alpha = alpha / total
        if x in self._triggers:
            self.last_trigger[int(x)] = float(t)
        self.prev_t = t
        self.count += 1

    def predictive(self, t_target: Optional[float] = None) -> np.ndarray:
        """Exact next-code distribution.

        A known target timestamp sharpens the next-state belief through
        the gap likelihood and the drift over the silent interval, and
        sets the boost-decay clock; without one, the gap is marginalized
        in closed form (resolvent kernel) and the boost surplus is taken
        at the prefix end.
        """
        if self.count == 0:
            raise ContractViolation("bayes filter: empty prefix")
        spec = self.spec
        t_eval = self.prev_t if t_target is None else float(t_target)
        if t_target is not None:
            gap = max(t_eval - self.prev_t, 0.0)
            w = self.alpha * (spec.gap_rates * np.exp(-spec.gap_rates * gap))
            w = (w / w.sum()) @ spec.drift_transition(gap)
        else:
            w = self.alpha @ spec.observation_kernel()
        em = boosted_emission(spec, t_eval, self.last_trigger)
        probs = w @ em
        return probs / probs.sum()


def state_posterior(prefix: IrregularSequence, spec: GeneratorSpec) -> np.ndarray:
    """Exact posterior over the latent state after the prefix."""
    f = BayesFilter(spec)
    for x, t in zip(prefix.tokens, prefix.times):
        f.absorb(int(x), float(t))
    return f.alpha


def bayes_predictive(prefix: IrregularSequence, spec: GeneratorSpec,
                     t_target: Optional[float] = None) -> np.ndarray:
    """Exact next-code distribution given the prefix (see BayesFilter)."""
    if len(prefix) == 0:
        raise ContractViolation("bayes_predictive: empty prefix")
    f = BayesFilter(spec)
    for x, t in zip(prefix.tokens, prefix.times):
        f.absorb(int(x), float(t))
    return f.predictive(t_target)


def rank_topk(probs, k: int) -> np.ndarray:
    """Top-k code ids by probability; ties break toward the lower id."""
    probs = np.asarray(probs)
    if k > probs.shape[0]:
        raise ContractViolation(f"rank_topk: k={k} exceeds {probs.shape[0]} codes")
    order = np.argsort(-probs, kind="stable")
    return order[:k]


def bayes_topk(prefix: IrregularSequence, spec: GeneratorSpec, k: int,
               t_target: Optional[float] = None) -> np.ndarray:
    """The oracle's K most probable next codes."""
    return rank_topk(bayes_predictive(prefix, spec, t_target), k)


def oracle_recall(spec: GeneratorSpec, cohort, window: int, ks,
                  max_targets: int = None) -> dict:
    """Bayes-oracle top-K recall under the evaluation protocol.

    Mirrors the model evaluation: the filter absorbs the ground-truth
    continuation and scores each target at its true timestamp.
    """
    ks = list(ks)
    hits = {k: [] for k in ks}
    for seq in cohort:
        if len(seq) <= window + 1:
            continue
        f = BayesFilter(spec)
        for x, t in zip(seq.tokens[:window], seq.times[:window]):
            f.absorb(int(x), float(t))
        n_targets = len(seq) - window
        if max_targets is not None:
            n_targets = min(n_targets, max_targets)
        for j in range(n_targets):
            idx = window + j
            probs = f.predictive(float(seq.times[idx]))
            ranked = rank_topk(probs, max(ks))
            for k in ks:
                hits[k].append(int(seq.tokens[idx] in ranked[:k]))
            f.absorb(int(seq.tokens[idx]), float(seq.times[idx]))
    return {f"recall@{k}": (float(np.mean(v)) if v else None) for k, v in hits.items()}


def stationary_distribution(transition, tol=1e-13, max_iter=100000) -> np.ndarray:
    """Stationary row vector by brute-force power iteration."""
    transition = np.asarray(transition, dtype=np.float64)
    v = np.full(transition.shape[0], 1.0 / transition.shape[0])
    for _ in range(max_iter):
        nxt = v @ transition
        if np.abs(nxt - v).max() < tol:
            return nxt / nxt.sum()
        v = nxt
    return v / v.sum()


def marginal_code_frequencies(spec: GeneratorSpec) -> np.ndarray:
    """Boost-free long-run code frequencies.

    The latent state observed at visit times is a Markov chain under the
    closed-form observation kernel; its stationary distribution times the
    emission matrix gives the code marginals.
    """
    return stationary_distribution(spec.observation_kernel()) @ spec.emission


def unigram_entropy(spec: GeneratorSpec) -> float:
    """Entropy (nats) of the boost-free marginal code distribution."""
    p = marginal_code_frequencies(spec)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# Serialization


def save_spec(spec: GeneratorSpec, path):
    doc = {
        "version": SPEC_VERSION,
        "vocab_size": spec.vocab_size,
        "latent_states": spec.latent_states,
        "transition": spec.transition.tolist(),
        "emission": spec.emission.tolist(),
        "gap_rates": spec.gap_rates.tolist(),
        "boosts": [[b.trigger, b.boosted, b.multiplier] for b in spec.boosts],
        "boost_decay": spec.boost_decay,
        "drift_rate": spec.drift_rate,
        "start_age": spec.start_age,
        "phenotype_state": spec.phenotype_state,
        "drug_window": spec.drug_window,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_spec(path) -> GeneratorSpec:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataFormatError(f"generator spec {path}: {e}") from e
    version = doc.pop("version", None)
    if version != SPEC_VERSION:
        raise DataFormatError(f"generator spec {path}: unsupported version {version}")
    doc["boosts"] = [Boost(*b) for b in doc.get("boosts", [])]
    return GeneratorSpec(**doc)


def write_dataset(sequences, path):
    """One JSON record per patient; float repr keeps timestamps lossless."""
    with open(path, "w", encoding="utf-8") as f:
        for seq in sequences:
            rec = {"id": seq.pid, "tokens": [int(x) for x in seq.tokens],
                   "times": [float(t) for t in seq.times], "labels": seq.labels}
            f.write(json.dumps(rec) + "\n")


def read_dataset(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}: line {lineno}: invalid JSON ({e.msg})") from e
            if rec.get("record_type") == "meta":
                continue
            try:
                seq = IrregularSequence(rec["id"], rec["tokens"], rec["times"],
                                        rec.get("labels", {}))
            except KeyError as e:
                raise DataFormatError(f"{path}: line {lineno}: missing field {e}") from e
            except ContractViolation as e:
                raise DataFormatError(f"{path}: line {lineno}: {e}") from e
            out.append(seq)
    return out


def split(cohort, fractions, seed: int):
    """Patient-level disjoint split; floor sizes, remainder goes to train."""
    fractions = tuple(fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ContractViolation("split: fractions must be three non-negatives summing to 1")
    n = len(cohort)
    order = np.random.default_rng(seed).permutation(n)
    n_valid = int(np.floor(fractions[1] * n))
    n_test = int(np.floor(fractions[2] * n))
    n_train = n - n_valid - n_test
    train = [cohort[i] for i in order[:n_train]]
    valid = [cohort[i] for i in order[n_train:n_train + n_valid]]
    test = [cohort[i] for i in order[n_train + n_valid:]]
    return train, valid, test


def canonical_spec() -> GeneratorSpec:
    """The benchmark generator shipped with the repo.

    Eight disease clusters over 50 codes; each cluster concentrates on a
    six-code block with a smoothing tail so every code stays reachable.
    The cluster state drifts continuously (ring-biased jumps at 0.5/yr),
    so the silence before a query time genuinely changes the next-code
    distribution; gap rates spread log-uniformly so observation density
    itself carries state information, and one strong decaying comorbidity
    boost (42 -> 49) drives the risk-trajectory analyses.
    """
    s_count, vocab = 8, 50
    transition = np.full((s_count, s_count), 0.30 / (s_count - 2))
    for s in range(s_count):
        transition[s, s] = 0.15
        transition[s, (s + 1) % s_count] = 0.55
    transition /= transition.sum(axis=1, keepdims=True)
    emission = np.full((s_count, vocab), 0.08 / vocab)
    block_weights = np.array([0.30, 0.22, 0.16, 0.12, 0.08, 0.04])
    for s in range(s_count):
        block = np.arange(6 * s, 6 * s + 6)
        emission[s, block] += 0.92 * block_weights
    emission /= emission.sum(axis=1, keepdims=True)
    gap_rates = np.geomspace(0.2, 3.0, s_count)
    return GeneratorSpec(
        vocab_size=vocab, latent_states=s_count, transition=transition,
        emission=emission, gap_rates=gap_rates,
        boosts=[Boost(trigger=42, boosted=49, multiplier=30.0)],
        boost_decay=1.0, drift_rate=0.5, start_age=40.0,
        phenotype_state=3, drug_window=0.5)
