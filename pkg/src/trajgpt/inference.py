"""Forecasting, evaluation, risk trajectories, and pooled representations.

ModelStream drives the recurrent form token by token: absorb() advances
every layer's per-head state in O(1) regardless of history length, and
peek() answers a query at an arbitrary future timestamp by running a
virtual copy of the last observation through the stack against
gap-decayed states, without mutating anything.
"""

from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .errors import ContractViolation
from .model import SOS_ID, ModelConfig
from .numerics.ops import sigmoid_pow_values
from .odebridge import gap_decay
from .datagen import IrregularSequence, rank_topk
from .positional import rope_phases, sinusoidal_table
from .sra import SRAState


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _rms_vec(x, gain, eps=1e-6):
    r = np.sqrt(np.mean(x * x) + eps)
    return (x / r) * gain


def _gelu_vec(x):
    dt = x.dtype.type
    c, a3 = dt(np.sqrt(2.0 / np.pi)), dt(0.044715)
    return 0.5 * x * (1.0 + np.tanh(c * (x + a3 * x ** 3)))


def _rotate_vec(v, t, rope_cfg):
    cos, sin = rope_phases(np.asarray([t]), rope_cfg)
    cos = cos[0].astype(v.dtype)
    sin = sin[0].astype(v.dtype)
    out = np.empty_like(v)
    v0, v1 = v[0::2], v[1::2]
    out[0::2] = v0 * cos - v1 * sin
    out[1::2] = v0 * sin + v1 * cos
    return out


class ModelStream:
    """Stateful recurrent evaluation of one sequence."""

    def __init__(self, params: dict, cfg: ModelConfig):
        self.params = params
        self.cfg = cfg
        self.rope = cfg.rope_config()
        self.inv = 1.0 / np.sqrt(cfg.head_dim)
        if cfg.attention == "sra":
            self.states = [[SRAState(np.zeros((cfg.head_dim, cfg.head_dim), dtype=cfg.dtype))
                            for _ in range(cfg.heads)] for _ in range(cfg.layers)]
        else:
            # softmax ablation keeps growing key/value caches per layer
            self.kv_cache = [([], []) for _ in range(cfg.layers)]
        self.pos = 0
        self.last_time = -np.inf
        self.last_embed_row = None
        self.last_logits = None

    def _input_row(self, model_id: int, pos: int) -> np.ndarray:
        cfg = self.cfg
        if not (0 <= model_id < cfg.vocab_size):
            raise ContractViolation("stream: id outside the model vocabulary")
        row = self.params["embed"][model_id].copy()
        if cfg.positional == "absolute":
            row += sinusoidal_table(pos + 1, cfg.d)[pos].astype(cfg.dtype)
        return row

    def _head_slices(self):
        d_h = self.cfg.head_dim
        return [slice(h * d_h, (h + 1) * d_h) for h in range(self.cfg.heads)]

    def _gamma(self, a, layer: int, head: int) -> float:
        cfg = self.cfg
        if cfg.decay_gating == "fixed":
            return cfg.fixed_gamma
        w = self.params[f"layers.{layer}.attn.w_gamma"][:, head]
        return float(sigmoid_pow_values(float(a @ w), cfg.tau))

    def _finish(self, h):
        p = self.params
        hn = _rms_vec(h, p["norm_f.gain"])
        if self.cfg.tie_output:
            return hn @ p["embed"].T
        return hn @ p["head.w"]

    def _ff(self, h, layer: int):
        p, pre = self.params, f"layers.{layer}."
        b = _rms_vec(h, p[pre + "norm2.gain"])
        f = _gelu_vec(b @ p[pre + "ff.w1"] + p[pre + "ff.b1"])
        return h + (f @ p[pre + "ff.w2"] + p[pre + "ff.b2"])

    def absorb(self, model_id: int, t: float) -> np.ndarray:
        """Advance all layers with one observation; returns its logits row."""
        if t < self.last_time:
            raise ContractViolation("stream: timestamps must be non-decreasing")
        p, cfg = self.params, self.cfg
        x = self._input_row(model_id, self.pos)
        self.last_embed_row = x.copy()
        h = x
        for i in range(cfg.layers):
            pre = f"layers.{i}."
            a = _rms_vec(h, p[pre + "norm1.gain"])
            q_full = a @ p[pre + "attn.w_q"]
            k_full = a @ p[pre + "attn.w_k"]
            v_full = a @ p[pre + "attn.w_v"]
            o = np.zeros(cfg.d, dtype=cfg.dtype)
            if cfg.attention == "sra":
                for head, sl in enumerate(self._head_slices()):
                    q, k, v = q_full[sl], k_full[sl], v_full[sl]
                    if self.rope is not None:
                        q = _rotate_vec(q, t, self.rope)
                        k = _rotate_vec(k, t, self.rope)
                    gamma = self._gamma(a, i, head)
                    st = self.states[i][head]
                    kv = np.outer(k, v)
                    st.s = gamma * st.s + kv
                    st.last_kv = kv
                    st.last_gamma = gamma
                    st.last_time = t
                    o[sl] = (self.inv * q) @ st.s
            else:
                keys, vals = self.kv_cache[i]
                keys.append(k_full)
                vals.append(v_full)
                k_mat = np.asarray(keys)
                v_mat = np.asarray(vals)
                for head, sl in enumerate(self._head_slices()):
                    scores = (self.inv * q_full[sl]) @ k_mat[:, sl].T
                    w = softmax(scores).astype(cfg.dtype)
                    o[sl] = w @ v_mat[:, sl]
            h = h + o @ p[pre + "attn.w_o"]
            h = self._ff(h, i)
        self.pos += 1
        self.last_time = t
        self.last_logits = self._finish(h)
        return self.last_logits

    def peek(self, t_target: float, gap_mode: str = "history_only") -> np.ndarray:
        """Logits for a virtual query at t_target; leaves the stream intact."""
        if self.cfg.attention != "sra":
            raise ContractViolation("peek: time-specific inference requires sra attention")
        if self.pos == 0:
            raise ContractViolation("peek: no observations absorbed yet")
        if t_target < self.last_time:
            raise ContractViolation("peek: target precedes the last observation")
        p, cfg = self.params, self.cfg
        h = self.last_embed_row.copy()
        for i in range(cfg.layers):
            pre = f"layers.{i}."
            a = _rms_vec(h, p[pre + "norm1.gain"])
            q_full = a @ p[pre + "attn.w_q"]
            o = np.zeros(cfg.d, dtype=cfg.dtype)
            for head, sl in enumerate(self._head_slices()):
                q = q_full[sl]
                if self.rope is not None:
                    q = _rotate_vec(q, t_target, self.rope)
                st = self.states[i][head]
                decayed = gap_decay(st, st.last_gamma, t_target - st.last_time, gap_mode)
                o[sl] = (self.inv * q) @ decayed.s
            h = h + o @ p[pre + "attn.w_o"]
            h = self._ff(h, i)
        return self._finish(h)


def open_stream(params: dict, cfg: ModelConfig, codes, times) -> ModelStream:
    """Stream with [SOS] plus the whole prefix absorbed."""
    codes = np.asarray(codes, dtype=np.int64)
    times = np.asarray(times, dtype=np.float64)
    if codes.shape[0] == 0:
        raise ContractViolation("open_stream: empty prefix")
    stream = ModelStream(params, cfg)
    stream.absorb(SOS_ID, float(times[0]))
    for c, t in zip(codes, times):
        stream.absorb(int(c) + 1, float(t))
    return stream


def code_probs(logits, cfg: ModelConfig) -> np.ndarray:
    """Full-vocab softmax restricted to dataset codes (ranking unchanged)."""
    return softmax(logits)[1:cfg.vocab_size - 1]


def autoregressive_forecast(params: dict, cfg: ModelConfig,
                            prefix: IrregularSequence, horizon: int):
    """Greedy unit-interval decoding; each prediction is absorbed.

    Returns a list of (code, time) pairs. Every step reads the last
    position's logits, so one step costs O(1) in the prefix length.
    """
    if horizon < 1:
        raise ContractViolation("autoregressive_forecast: horizon must be >= 1")
    stream = open_stream(params, cfg, prefix.tokens, prefix.times)
    out = []
    t = float(prefix.times[-1])
    for _ in range(horizon):
        probs = code_probs(stream.last_logits, cfg)
        code = int(rank_topk(probs, 1)[0])
        t += 1.0
        stream.absorb(code + 1, t)
        out.append((code, t))
    return out


def time_specific_forecast(params: dict, cfg: ModelConfig, prefix: IrregularSequence,
                           target_times, gap_mode: str = "history_only",
                           absorb: str = "truth", truth_codes=None):
    """Predictions at explicit target timestamps via state evolution.

    absorb="truth" (evaluation) feeds the ground-truth code after each
    target; absorb="prediction" rolls out the model's own choices;
    absorb="none" answers every target directly from the window-end
    state (each query costs O(1), independent of the other targets).
    Returns (predicted codes, full-vocabulary probability rows).
    """
    target_times = np.asarray(target_times, dtype=np.float64)
    if target_times.size == 0 or np.any(np.diff(target_times) < 0):
        raise ContractViolation("time_specific_forecast: targets must be non-decreasing")
    if target_times[0] < prefix.times[-1]:
        raise ContractViolation("time_specific_forecast: target precedes prefix end")
    if absorb not in ("truth", "prediction", "none"):
        raise ContractViolation(f"time_specific_forecast: unknown absorb mode {absorb!r}")
    if absorb == "truth":
        if truth_codes is None or len(truth_codes) != target_times.shape[0]:
            raise ContractViolation("time_specific_forecast: truth codes required per target")
    stream = open_stream(params, cfg, prefix.tokens, prefix.times)
    preds, rows = [], []
    for j, t in enumerate(target_times):
        probs_full = softmax(stream.peek(float(t), gap_mode))
        rows.append(probs_full)
        code = int(rank_topk(probs_full[1:cfg.vocab_size - 1], 1)[0])
        preds.append(code)
        if absorb != "none":
            absorbed = int(truth_codes[j]) if absorb == "truth" else code
            stream.absorb(absorbed + 1, float(t))
    return preds, np.asarray(rows)


def autoregressive_rows(params: dict, cfg: ModelConfig, prefix: IrregularSequence,
                        horizon: int):
    """Greedy unit-interval rollout keeping each step's code distribution.

    Returns (rows, codes, times): rows[k] is the code-probability row the
    model held before absorbing its own step-(k+1) prediction.
    """
    if horizon < 1:
        raise ContractViolation("autoregressive_rows: horizon must be >= 1")
    stream = open_stream(params, cfg, prefix.tokens, prefix.times)
    rows, codes, times = [], [], []
    t = float(prefix.times[-1])
    for _ in range(horizon):
        probs = code_probs(stream.last_logits, cfg)
        code = int(rank_topk(probs, 1)[0])
        t += 1.0
        rows.append(probs)
        codes.append(code)
        times.append(t)
        stream.absorb(code + 1, t)
    return np.asarray(rows), codes, times


def topk_recall(prob_rows, truth_codes, k: int) -> float:
    """Fraction of targets whose true code ranks in the top k."""
    prob_rows = np.asarray(prob_rows)
    truth_codes = np.asarray(truth_codes, dtype=np.int64)
    if prob_rows.shape[0] != truth_codes.shape[0]:
        raise ContractViolation("topk_recall: one probability row per target required")
    if k > prob_rows.shape[1]:
        raise ContractViolation(f"topk_recall: k={k} exceeds vocabulary {prob_rows.shape[1]}")
    hits = sum(int(t in rank_topk(row, k)) for row, t in zip(prob_rows, truth_codes))
    return hits / truth_codes.shape[0]


@dataclass
class RiskTrajectory:
    """Per-code probability over a time grid with first-difference growth."""

    code: int
    grid: np.ndarray
    risk: np.ndarray
    growth: np.ndarray = field(default=None)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.risk = np.asarray(self.risk, dtype=np.float64)
        if self.growth is None:
            self.growth = np.diff(self.risk)
        if np.any(self.risk < 0) or np.any(self.risk > 1):
            raise ContractViolation("RiskTrajectory: risk values must lie in [0, 1]")
        if self.growth.shape[0] != self.grid.shape[0] - 1:
            raise ContractViolation("RiskTrajectory: growth must have grid length - 1")


def risk_trajectory(params: dict, cfg: ModelConfig, seq: IrregularSequence,
                    code: int, grid, gap_mode: str = "history_only") -> RiskTrajectory:
    """Interpolated/extrapolated probability of ``code`` along a time grid.

    A grid point inside the observed window conditions on observations at
    or before it; points past the window extrapolate forward; points
    before the first observation use the time-reversed stream.
    """
    if not (0 <= code < cfg.n_codes):
        raise ContractViolation("risk_trajectory: code outside the dataset vocabulary")
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0 or np.any(np.diff(grid) < 0):
        raise ContractViolation("risk_trajectory: grid must be non-decreasing")
    model_id = code + 1
    risks = np.empty(grid.shape[0])

    backward_pts = grid < seq.times[0]
    if backward_pts.any():
        rev = IrregularSequence(seq.pid, seq.tokens[::-1].copy(),
                                (-seq.times[::-1]).copy(), seq.labels)
        rstream = open_stream(params, cfg, rev.tokens, rev.times)
        for i in np.nonzero(backward_pts)[0]:
            probs = softmax(rstream.peek(float(-grid[i]), gap_mode))
            risks[i] = probs[model_id]

    stream = ModelStream(params, cfg)
    stream.absorb(SOS_ID, float(seq.times[0]))
    nxt = 0
    for i in np.nonzero(~backward_pts)[0]:
        g = grid[i]
        while nxt < len(seq) and seq.times[nxt] <= g:
            stream.absorb(int(seq.tokens[nxt]) + 1, float(seq.times[nxt]))
            nxt += 1
        probs = softmax(stream.peek(float(g), gap_mode))
        risks[i] = probs[model_id]
    return RiskTrajectory(code=code, grid=grid, risk=risks)


def sequence_embedding(params: dict, cfg: ModelConfig, seq: IrregularSequence,
                       truncate_at: int) -> np.ndarray:
    """Mean of final-layer rows over the first ``truncate_at`` observations."""
    if truncate_at < 1 or truncate_at > len(seq):
        raise ContractViolation("sequence_embedding: truncate_at outside [1, len]")
    codes = seq.tokens[:truncate_at]
    times = seq.times[:truncate_at]
    ids, inp_times, _ = model_mod.prepare_example(codes, times, cfg)
    rows = model_mod.hidden_rows(ids, inp_times, cfg, params)
    return rows[1:].mean(axis=0)  # observation rows; the start marker is skipped


def centroid_classify(embeddings, labels, query):
    """Nearest class centroid by cosine; returns (label, margin).

    Margin is best minus second-best similarity; exact ties resolve to
    the lower class id.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size == 0:
        raise ContractViolation("centroid_classify: no labeled examples")
    query = np.asarray(query, dtype=np.float64)
    sims = []
    for c in classes:
        members = embeddings[labels == c]
        if members.shape[0] == 0:
            raise ContractViolation(f"centroid_classify: empty class {c}")
        centroid = members.mean(axis=0)
        denom = np.linalg.norm(centroid) * np.linalg.norm(query)
        sims.append(float(centroid @ query / denom) if denom > 0 else 0.0)
    sims = np.asarray(sims)
    best = int(np.argmax(sims))  # first max -> lowest class id on ties
    if classes.size == 1:
        return classes[0], sims[0]
    second = np.partition(sims, -2)[-2]
    return classes[best], float(sims[best] - second)


def forecast_patient(params: dict, cfg: ModelConfig, seq: IrregularSequence,
                     window: int, gap_mode: str = "history_only",
                     max_targets: int = None):
    """Evaluation-mode probability rows for both inference methods.

    Both methods absorb the same ground-truth continuation; they differ
    only in the readout per target (last-position logits vs a
    time-specific peek at the target timestamp). Returns None when the
    sequence is too short to leave targets after the look-up window.
    """
    if len(seq) <= window + 1:
        return None
    codes, times = seq.tokens, seq.times
    n_targets = len(seq) - window
    if max_targets is not None:
        n_targets = min(n_targets, max_targets)
    stream = open_stream(params, cfg, codes[:window], times[:window])
    rows_ts, rows_ar, truth = [], [], []
    for j in range(n_targets):
        idx = window + j
        t = float(times[idx])
        rows_ar.append(code_probs(stream.last_logits, cfg))
        rows_ts.append(code_probs(stream.peek(t, gap_mode), cfg))
        truth.append(int(codes[idx]))
        stream.absorb(int(codes[idx]) + 1, t)
    return {
        "id": seq.pid,
        "target_times": times[window:window + n_targets].tolist(),
        "truth": truth,
        "rows_time_specific": np.asarray(rows_ts),
        "rows_auto_regressive": np.asarray(rows_ar),
    }


def forecast_patient_rollout(params: dict, cfg: ModelConfig, seq: IrregularSequence,
                             window: int, gap_mode: str = "history_only",
                             max_targets: int = None, horizon_cap: int = 64):
    """Forecast-task probability rows without ground-truth absorption.

    Time-specific answers each true target timestamp directly from the
    window-end state; auto-regressive rolls out unit steps absorbing its
    own greedy predictions, and each target is scored against the step
    nearest its timestamp.
    """
    if len(seq) <= window + 1:
        return None
    n_targets = len(seq) - window
    if max_targets is not None:
        n_targets = min(n_targets, max_targets)
    prefix = IrregularSequence(seq.pid, seq.tokens[:window].copy(),
                               seq.times[:window].copy(), seq.labels)
    target_times = seq.times[window:window + n_targets]
    truth = [int(c) for c in seq.tokens[window:window + n_targets]]
    _, rows_full = time_specific_forecast(params, cfg, prefix, target_times,
                                          gap_mode, absorb="none")
    rows_ts = rows_full[:, 1:cfg.vocab_size - 1]
    t_end = float(prefix.times[-1])
    horizon = int(np.clip(np.ceil(target_times[-1] - t_end), 1, horizon_cap))
    ar_rows, _, _ = autoregressive_rows(params, cfg, prefix, horizon)
    steps = np.clip(np.round(target_times - t_end).astype(int), 1, horizon)
    rows_ar = ar_rows[steps - 1]
    return {
        "id": seq.pid,
        "target_times": target_times.tolist(),
        "truth": truth,
        "rows_time_specific": rows_ts,
        "rows_auto_regressive": rows_ar,
    }


def evaluate_cohort(params: dict, cfg: ModelConfig, cohort, window: int,
                    ks, gap_mode: str = "history_only", max_targets: int = None,
                    buckets=((1, 50), (51, 100), (101, None)),
                    absorb: str = "truth"):
    """Aggregate top-K recall for both inference methods.

    absorb="truth" scores both methods on a shared ground-truth stream
    (readout comparison); absorb="rollout" scores the forecast task
    proper: window-end time-specific queries vs a unit-step rollout.
    Per-target hits pool across patients; bucket recalls group targets by
    their ordinal distance past the look-up window.
    """
    ks = list(ks)
    for k in ks:
        if k > cfg.n_codes:
            raise ContractViolation(f"evaluate: k={k} exceeds vocabulary {cfg.n_codes}")
    if absorb not in ("truth", "rollout"):
        raise ContractViolation(f"evaluate: unknown absorb mode {absorb!r}")
    hits = {m: {k: [] for k in ks} for m in ("time_specific", "auto_regressive")}
    bucket_hits = {m: {b: [] for b in buckets} for m in ("time_specific", "auto_regressive")}
    records = []
    for seq in cohort:
        if absorb == "truth":
            rec = forecast_patient(params, cfg, seq, window, gap_mode, max_targets)
        else:
            rec = forecast_patient_rollout(params, cfg, seq, window, gap_mode,
                                           max_targets)
        if rec is None:
            continue
        for mode, key in (("time_specific", "rows_time_specific"),
                          ("auto_regressive", "rows_auto_regressive")):
            rows = rec[key]
            for j, truth in enumerate(rec["truth"]):
                ranked = rank_topk(rows[j], max(ks))
                for k in ks:
                    hits[mode][k].append(int(truth in ranked[:k]))
                step = j + 1
                for b in buckets:
                    lo, hi = b
                    if step >= lo and (hi is None or step <= hi):
                        bucket_hits[mode][b].append(int(truth in ranked[:min(10, cfg.n_codes)]))
        k_top = ks[0]
        records.append({
            "id": rec["id"],
            "target_times": rec["target_times"],
            "topk": [rank_topk(r, k_top).tolist() for r in rec["rows_time_specific"]],
            "truth": rec["truth"],
            "recall": float(np.mean([int(t in rank_topk(r, k_top))
                                     for r, t in zip(rec["rows_time_specific"], rec["truth"])])),
        })
    report = {"absorb": absorb}
    for mode in ("time_specific", "auto_regressive"):
        report[mode] = {f"recall@{k}": (float(np.mean(hits[mode][k])) if hits[mode][k] else None)
                        for k in ks}
        report[mode]["buckets"] = {
            f"{lo}-{hi if hi is not None else 'end'}":
                (float(np.mean(v)) if v else None)
            for (lo, hi), v in bucket_hits[mode].items()}
        report[mode]["n_targets"] = len(hits[mode][ks[0]])
    return report, records
