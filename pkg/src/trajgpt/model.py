"""Decoder stack: embeddings, gated-attention layers, loss, and training.

Pre-norm residual blocks (RMS scaling), multi-head selective recurrent
attention or the causal-softmax ablation, GELU feed-forward, and an
Adam-style optimizer with linear warmup. Token id 0 is reserved for the
start marker and vocab_size - 1 for padding; dataset codes live in
between, shifted up by one.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import sra
from .errors import ContractViolation, NumericFailure
from .numerics import ops
from .numerics.tape import Tape
from .positional import RopeConfig, sinusoidal_table

PRECISIONS = {"single": np.float32, "double": np.float64}
SOS_ID = 0


@dataclass
class ModelConfig:
    vocab_size: int                  # includes [SOS] = 0 and pad = vocab_size - 1
    d: int
    heads: int
    layers: int
    ff_width: int = 0                # 0 -> 2 * d
    tau: float = 20.0
    theta_base: float = 10000.0
    time_scale: float = 1.0
    precision: str = "single"
    decay_gating: str = "data"       # "data" | "fixed"
    fixed_gamma: float = 0.96
    positional: str = "rope"         # "rope" | "absolute"
    attention: str = "sra"           # "sra" | "softmax_gpt2"
    tie_output: bool = False

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ContractViolation("ModelConfig: vocab_size must be at least 2")
        if self.d % self.heads != 0:
            raise ContractViolation(f"ModelConfig: d={self.d} not divisible by heads={self.heads}")
        if self.ff_width == 0:
            self.ff_width = 2 * self.d
        if self.precision not in PRECISIONS:
            raise ContractViolation(f"ModelConfig: unknown precision {self.precision!r}")
        if self.decay_gating not in ("data", "fixed"):
            raise ContractViolation(f"ModelConfig: unknown decay_gating {self.decay_gating!r}")
        if not (0.0 < self.fixed_gamma <= 1.0):
            raise ContractViolation("ModelConfig: fixed_gamma must lie in (0, 1]")
        if self.positional not in ("rope", "absolute"):
            raise ContractViolation(f"ModelConfig: unknown positional {self.positional!r}")
        if self.attention not in ("sra", "softmax_gpt2"):
            raise ContractViolation(f"ModelConfig: unknown attention {self.attention!r}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def pad_id(self) -> int:
        return self.vocab_size - 1

    @property
    def n_codes(self) -> int:
        return self.vocab_size - 2

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def rope_config(self) -> Optional[RopeConfig]:
        if self.positional != "rope":
            return None
        return RopeConfig(head_dim=self.head_dim, theta_base=self.theta_base,
                          time_scale=self.time_scale)

    @classmethod
    def for_codes(cls, n_codes: int, **kw) -> "ModelConfig":
        """Config for a dataset with ``n_codes`` distinct codes."""
        return cls(vocab_size=n_codes + 2, **kw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def encode_codes(codes, cfg: ModelConfig) -> np.ndarray:
    """Dataset code ids -> model vocabulary ids (shift past [SOS])."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= cfg.n_codes):
        raise ContractViolation("encode_codes: code id outside the dataset vocabulary")
    return codes + 1


def prepare_example(codes, times, cfg: ModelConfig):
    """Training view of a sequence: ([SOS] + ids, times, left-shifted targets)."""
    ids = encode_codes(codes, cfg)
    times = np.asarray(times, dtype=np.float64)
    if ids.shape[0] == 0:
        raise ContractViolation("prepare_example: empty sequence")
    inp = np.concatenate(([SOS_ID], ids))
    inp_times = np.concatenate((times[:1], times))
    return inp, inp_times, ids.copy()


def init_params(cfg: ModelConfig, seed: int) -> dict:
    """Parameter dict in a fixed insertion order (update order contract)."""
    rng = np.random.default_rng([seed, 0])
    dt = cfg.dtype

    def normal(*shape):
        return (rng.standard_normal(shape) * 0.02).astype(dt)

    params = {"embed": normal(cfg.vocab_size, cfg.d)}
    for i in range(cfg.layers):
        p = f"layers.{i}."
        params[p + "norm1.gain"] = np.ones(cfg.d, dtype=dt)
        params[p + "attn.w_q"] = normal(cfg.d, cfg.d)
        params[p + "attn.w_k"] = normal(cfg.d, cfg.d)
        params[p + "attn.w_v"] = normal(cfg.d, cfg.d)
        params[p + "attn.w_o"] = normal(cfg.d, cfg.d)
        # zero init puts every gate at sigmoid(0)^(1/tau)
        params[p + "attn.w_gamma"] = np.zeros((cfg.d, cfg.heads), dtype=dt)
        params[p + "norm2.gain"] = np.ones(cfg.d, dtype=dt)
        params[p + "ff.w1"] = normal(cfg.d, cfg.ff_width)
        params[p + "ff.b1"] = np.zeros(cfg.ff_width, dtype=dt)
        params[p + "ff.w2"] = normal(cfg.ff_width, cfg.d)
        params[p + "ff.b2"] = np.zeros(cfg.d, dtype=dt)
    params["norm_f.gain"] = np.ones(cfg.d, dtype=dt)
    if not cfg.tie_output:
        params["head.w"] = normal(cfg.d, cfg.vocab_size)
    return params


def layer_sra_params(params: dict, cfg: ModelConfig, layer: int) -> sra.SRAParams:
    """SRAParams view over one layer's arrays (shared memory, no copies)."""
    p = f"layers.{layer}."
    return sra.SRAParams(
        w_q=params[p + "attn.w_q"], w_k=params[p + "attn.w_k"],
        w_v=params[p + "attn.w_v"], w_o=params[p + "attn.w_o"],
        w_gamma=params[p + "attn.w_gamma"], heads=cfg.heads, tau=cfg.tau,
        rope=cfg.rope_config(),
        fixed_gamma=cfg.fixed_gamma if cfg.decay_gating == "fixed" else None)


def embed_rows(params: dict, ids, cfg: ModelConfig) -> np.ndarray:
    """Embedding lookup on model-vocabulary ids."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ContractViolation("embed: id outside the model vocabulary")
    return params["embed"][ids]


def _softmax_attention_nodes(x, times, cfg: ModelConfig, weights):
    """Causal softmax attention (the no-linear-attention ablation)."""
    h = cfg.heads
    inv = 1.0 / np.sqrt(cfg.head_dim)
    q_heads = ops.split_cols(ops.matmul(x, weights["w_q"]), h)
    k_heads = ops.split_cols(ops.matmul(x, weights["w_k"]), h)
    v_heads = ops.split_cols(ops.matmul(x, weights["w_v"]), h)
    outs = []
    for q, k, v in zip(q_heads, k_heads, v_heads):
        scores = ops.scale(ops.matmul(q, ops.transpose(k)), inv)
        outs.append(ops.matmul(ops.causal_softmax(scores), v))
    merged = outs[0] if len(outs) == 1 else ops.concat_cols(outs)
    return ops.matmul(merged, weights["w_o"])


def stack_nodes(tape: Tape, weights: dict, ids, times, cfg: ModelConfig,
                form: str = "parallel"):
    """Final-norm hidden rows (pre-head) for a sequence of model ids."""
    ids = np.asarray(ids, dtype=np.int64)
    x = ops.gather_rows(weights["embed"], ids)
    if cfg.positional == "absolute":
        table = sinusoidal_table(ids.shape[0], cfg.d).astype(cfg.dtype)
        x = ops.add(x, tape.constant(table))
    for i in range(cfg.layers):
        p = f"layers.{i}."
        a = ops.rms_norm(x, weights[p + "norm1.gain"])
        attn_weights = {name: weights[p + "attn." + name]
                        for name in ("w_q", "w_k", "w_v", "w_o", "w_gamma")}
        if cfg.attention == "softmax_gpt2":
            attn = _softmax_attention_nodes(a, times, cfg, attn_weights)
        else:
            meta = sra.SRAParams(
                w_q=attn_weights["w_q"].value, w_k=attn_weights["w_k"].value,
                w_v=attn_weights["w_v"].value, w_o=attn_weights["w_o"].value,
                w_gamma=attn_weights["w_gamma"].value, heads=cfg.heads,
                tau=cfg.tau, rope=cfg.rope_config(),
                fixed_gamma=cfg.fixed_gamma if cfg.decay_gating == "fixed" else None)
            attn = sra.attention_nodes(a, times, meta, form=form, weights=attn_weights)
        x = ops.add(x, attn)
        b = ops.rms_norm(x, weights[p + "norm2.gain"])
        ff = ops.add_rowvec(ops.matmul(b, weights[p + "ff.w1"]), weights[p + "ff.b1"])
        ff = ops.add_rowvec(ops.matmul(ops.gelu(ff), weights[p + "ff.w2"]),
                            weights[p + "ff.b2"])
        x = ops.add(x, ff)
    return ops.rms_norm(x, weights["norm_f.gain"])


def forward_nodes(tape: Tape, weights: dict, ids, times, cfg: ModelConfig,
                  form: str = "parallel"):
    """Logits node for one sequence of model-vocabulary ids."""
    final = stack_nodes(tape, weights, ids, times, cfg, form=form)
    if cfg.tie_output:
        return ops.matmul(final, ops.transpose(weights["embed"]))
    return ops.matmul(final, weights["head.w"])


def forward(ids, times, cfg: ModelConfig, params: dict,
            form: str = "parallel") -> np.ndarray:
    """Per-position logits for a sequence of model-vocabulary ids."""
    ids = np.asarray(ids, dtype=np.int64)
    times = np.asarray(times, dtype=np.float64)
    if ids.shape[0] == 0:
        raise ContractViolation("forward: empty sequence")
    if ids.shape[0] != times.shape[0]:
        raise ContractViolation("forward: ids and times must have equal length")
    if np.any(np.diff(times) < 0):
        raise ContractViolation("forward: timestamps must be non-decreasing")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ContractViolation("forward: id outside the model vocabulary")
    tape = Tape(recording=False)
    weights = {k: tape.leaf(v) for k, v in params.items()}
    return forward_nodes(tape, weights, ids, times, cfg, form=form).value


def hidden_rows(ids, times, cfg: ModelConfig, params: dict,
                form: str = "parallel") -> np.ndarray:
    """Final-norm hidden states per position (the pooled-representation source)."""
    tape = Tape(recording=False)
    weights = {k: tape.leaf(v) for k, v in params.items()}
    return stack_nodes(tape, weights, ids, times, cfg, form=form).value


def nll_loss(logits, targets, pad_id: Optional[int] = None) -> float:
    """Mean cross-entropy over (non-pad) positions."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[0] != targets.shape[0]:
        raise ContractViolation(
            f"nll_loss: {logits.shape[0]} logit rows vs {targets.shape[0]} targets")
    mask = np.ones(targets.shape[0], dtype=bool) if pad_id is None else targets != pad_id
    if not mask.any():
        raise ContractViolation("nll_loss: no unmasked positions")
    m = logits.max(axis=1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    rows = np.arange(targets.shape[0])
    return float(-(logp[rows, targets] * mask).sum() / mask.sum())


@dataclass
class TrainHyper:
    lr: float = 1e-3
    warmup: int = 200
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    batch_size: int = 8


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_opt_state(params: dict) -> AdamState:
    return AdamState(step=0,
                     m={k: np.zeros_like(p) for k, p in params.items()},
                     v={k: np.zeros_like(p) for k, p in params.items()})


def collate(batch, cfg: ModelConfig):
    """Pad a batch of (codes, times) to a common length.

    Pad slots get pad_id and the sequence's final timestamp; the mask
    excludes them from the loss.
    """
    if len(batch) == 0:
        raise ContractViolation("collate: empty batch")
    prepared = [prepare_example(codes, times, cfg) for codes, times in batch]
    width = max(p[0].shape[0] for p in prepared)
    bsz = len(prepared)
    ids = np.full((bsz, width), cfg.pad_id, dtype=np.int64)
    times = np.zeros((bsz, width), dtype=np.float64)
    targets = np.full((bsz, width - 1), cfg.pad_id, dtype=np.int64)
    mask = np.zeros((bsz, width - 1), dtype=bool)
    for b, (inp, inp_times, tgt) in enumerate(prepared):
        n = inp.shape[0]
        ids[b, :n] = inp
        times[b, :n] = inp_times
        times[b, n:] = inp_times[-1]
        targets[b, :n - 1] = tgt
        mask[b, :n - 1] = True
    return ids, times, targets, mask


def _grad_diagnostics(grads: dict) -> str:
    by_layer = {}
    for k, g in grads.items():
        layer = k.split(".")[1] if k.startswith("layers.") else "top"
        by_layer.setdefault(layer, 0.0)
        by_layer[layer] += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    parts = [f"layer {k}: |g|={np.sqrt(v):.3e}" for k, v in sorted(by_layer.items())]
    return "; ".join(parts)


def loss_and_grads(params: dict, batch, cfg: ModelConfig, form: str = "parallel"):
    """Pooled mean cross-entropy over the batch and its parameter gradients."""
    ids, times, targets, mask = collate(batch, cfg)
    grads = {k: np.zeros_like(p) for k, p in params.items()}
    total = 0.0
    count = 0
    for b in range(ids.shape[0]):
        tape = Tape()
        weights = {k: tape.leaf(v) for k, v in params.items()}
        logits = forward_nodes(tape, weights, ids[b], times[b], cfg, form=form)
        body = ops.slice_rows(logits, 0, ids.shape[1] - 1)
        ce, cnt = ops.cross_entropy_sum(body, targets[b], mask[b])
        tape.backward(ce)
        for k, w in weights.items():
            if w.grad is not None:
                grads[k] += w.grad
        total += float(ce.value)
        count += cnt
    loss = total / count
    inv = 1.0 / count
    for k in grads:
        grads[k] *= inv
    return loss, grads


def train_step(params: dict, opt: AdamState, batch, cfg: ModelConfig,
               hp: TrainHyper, form: str = "parallel") -> float:
    """One deterministic optimizer update in place; returns the batch loss."""
    loss, grads = loss_and_grads(params, batch, cfg, form=form)
    if not np.isfinite(loss):
        raise NumericFailure(
            f"train_step: non-finite loss at step {opt.step + 1}; "
            + _grad_diagnostics(grads))
    opt.step += 1
    t = opt.step
    lr_t = hp.lr * min(1.0, t / hp.warmup) if hp.warmup > 0 else hp.lr
    b1, b2 = hp.beta1, hp.beta2
    for k, p in params.items():
        g = grads[k]
        opt.m[k] = b1 * opt.m[k] + (1 - b1) * g
        opt.v[k] = b2 * opt.v[k] + (1 - b2) * g * g
        m_hat = opt.m[k] / (1 - b1 ** t)
        v_hat = opt.v[k] / (1 - b2 ** t)
        p -= (lr_t * m_hat / (np.sqrt(v_hat) + hp.eps)).astype(p.dtype, copy=False)
    return loss


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Stateless per-step batch sampling (bit-exact resume)."""
    rng = np.random.default_rng([seed, 1, step])
    return rng.integers(0, n, size=min(batch_size, n))


def pretrain(cfg: ModelConfig, data, steps: int, hp: TrainHyper, seed: int,
             params: dict = None, opt: AdamState = None, form: str = "parallel",
             on_step=None):
    """Run ``steps`` optimizer updates over (codes, times) pairs.

    Resumable: passing the params/opt from a checkpoint continues the
    exact run (batch order is a pure function of seed and step).
    """
    if params is None:
        params = init_params(cfg, seed)
    if opt is None:
        opt = init_opt_state(params)
    losses = []
    for _ in range(steps):
        idx = batch_indices(seed, opt.step + 1, len(data), hp.batch_size)
        batch = [data[i] for i in idx]
        loss = train_step(params, opt, batch, cfg, hp, form=form)
        losses.append((opt.step, loss))
        if on_step is not None:
            on_step(opt.step, loss)
    return params, opt, losses
