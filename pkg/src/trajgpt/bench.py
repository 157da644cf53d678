"""Timing harness for the complexity contract and the kernel backends.

Everything is wall-clock with median-of-repeats; shapes and ratios are
asserted by the acceptance suite, absolute numbers are informational.
"""

import time

import numpy as np

from . import kernels, model
from .errors import ContractViolation
from .inference import open_stream

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # single-threaded BLAS or none installed
    from contextlib import nullcontext

    def threadpool_limits(limits=None):
        return nullcontext()


def median_time(fn, repeats: int = 5, warmup: int = 1) -> float:
    """Median wall time with BLAS pinned to one thread.

    Thread-count heuristics in BLAS change with the matrix size and
    would contaminate the scaling ratios this harness exists to measure.
    """
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            fn()
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            samples.append(time.perf_counter() - t0)
    return float(np.median(samples))


def interleaved_min_times(fns: dict, repeats: int = 5) -> dict:
    """Best-of-repeats wall time per labeled callable, round-robin order.

    Warming everything first and interleaving the repetitions spreads
    machine noise evenly across the sizes being compared, which keeps
    the scaling ratios honest on a shared host.
    """
    best = {k: np.inf for k in fns}
    with threadpool_limits(limits=1):
        for fn in fns.values():
            fn()
        for _ in range(repeats):
            for k, fn in fns.items():
                t0 = time.perf_counter()
                fn()
                best[k] = min(best[k], time.perf_counter() - t0)
    return best


def _random_sequence(n: int, n_codes: int, seed: int):
    rng = np.random.default_rng([seed, n])
    codes = rng.integers(0, n_codes, n)
    times = np.cumsum(rng.exponential(1.0, n)) + 40.0
    return codes, times


def bench_config(d: int = 32, heads: int = 4, layers: int = 2,
                 attention: str = "sra", positional: str = "rope") -> model.ModelConfig:
    return model.ModelConfig(vocab_size=52, d=d, heads=heads, layers=layers,
                             precision="single", attention=attention,
                             positional=positional)


def bench_train_scaling(lengths, variant: str = "recurrent", seed: int = 0,
                        repeats: int = 3, cfg: model.ModelConfig = None):
    """Forward+backward wall time per sequence length.

    variant: "recurrent" | "parallel" (SRA form) or "softmax" (the
    quadratic baseline).
    """
    if variant == "softmax":
        cfg = cfg or bench_config(attention="softmax_gpt2", positional="absolute")
        form = "parallel"
    elif variant in ("recurrent", "parallel"):
        cfg = cfg or bench_config()
        form = variant
    else:
        raise ContractViolation(f"bench: unknown variant {variant!r}")
    params = model.init_params(cfg, seed=seed)
    fns = {}
    for n in lengths:
        codes, times = _random_sequence(n, cfg.n_codes, seed)
        batch = [(codes, times)]
        fns[int(n)] = (lambda batch=batch:
                       model.loss_and_grads(params, batch, cfg, form=form))
    best = interleaved_min_times(fns, repeats=repeats)
    return [{"n": n, "seconds": best[n]} for n in sorted(best)]


def doubling_ratios(rows):
    """Wall-time ratio for each consecutive doubling of n."""
    ratios = []
    for a, b in zip(rows, rows[1:]):
        if b["n"] == 2 * a["n"]:
            ratios.append({"n": b["n"], "ratio": b["seconds"] / a["seconds"]})
    return ratios


def bench_inference_latency(history_lengths, n_queries: int = 128, seed: int = 0,
                            cfg: model.ModelConfig = None, repeats: int = 5):
    """Best per-query latency of time-specific peeks vs history length."""
    cfg = cfg or bench_config()
    params = model.init_params(cfg, seed=seed)
    fns = {}
    for n in history_lengths:
        codes, times = _random_sequence(n, cfg.n_codes, seed)
        stream = open_stream(params, cfg, codes, times)
        targets = float(times[-1]) + np.linspace(0.1, 3.0, n_queries)

        def run(stream=stream, targets=targets):
            for t in targets:
                stream.peek(float(t))

        fns[int(n)] = run
    best = interleaved_min_times(fns, repeats=repeats)
    return [{"history": n, "per_query_seconds": best[n] / n_queries}
            for n in sorted(best)]


def bench_kernel_backends(lengths, head_dim: int = 8, seed: int = 0, repeats: int = 5):
    """Compiled vs pure-numpy kernels on the scan and decay-matrix hot loops."""
    backends = {"numpy": kernels.get_backend("numpy")}
    try:
        backends["cython"] = kernels.get_backend("cython")
    except ImportError:
        pass
    rng = np.random.default_rng(seed)
    out = []
    for n in lengths:
        q = rng.standard_normal((n, head_dim)).astype(np.float32)
        k = rng.standard_normal((n, head_dim)).astype(np.float32)
        v = rng.standard_normal((n, head_dim)).astype(np.float32)
        g = rng.uniform(0.8, 1.0, n).astype(np.float32)
        do = rng.standard_normal((n, head_dim)).astype(np.float32)
        dd = rng.standard_normal((n, n)).astype(np.float32)
        row = {"n": int(n)}
        for name, impl in backends.items():
            o, s_all = kernels.sra_scan_forward(q, k, v, g, impl=impl)
            row[f"{name}_scan_fwd"] = median_time(
                lambda impl=impl: kernels.sra_scan_forward(q, k, v, g, impl=impl),
                repeats=repeats)
            row[f"{name}_scan_bwd"] = median_time(
                lambda impl=impl, s=s_all: kernels.sra_scan_backward(
                    q, k, v, g, s, do, impl=impl), repeats=repeats)
            d_mat = kernels.decay_matrix_forward(g, impl=impl)
            row[f"{name}_decay_fwd"] = median_time(
                lambda impl=impl: kernels.decay_matrix_forward(g, impl=impl),
                repeats=repeats)
            row[f"{name}_decay_bwd"] = median_time(
                lambda impl=impl, d=d_mat: kernels.decay_matrix_backward(
                    g, d, dd, impl=impl), repeats=repeats)
        out.append(row)
    return out


def run_bench(lengths=(256, 512, 1024, 2048), inference_histories=(512, 2048),
              repeats: int = 3, seed: int = 0) -> dict:
    """The full timing report consumed by the CLI and the acceptance suite."""
    report = {"active_backend": kernels.backend_name(), "lengths": list(lengths)}
    for variant in ("recurrent", "parallel", "softmax"):
        rows = bench_train_scaling(lengths, variant, seed=seed, repeats=repeats)
        report[variant] = {"times": rows, "doubling": doubling_ratios(rows)}
    lat = bench_inference_latency(inference_histories, seed=seed)
    report["time_specific_latency"] = lat
    if len(lat) >= 2 and lat[0]["per_query_seconds"] > 0:
        report["latency_ratio"] = (lat[-1]["per_query_seconds"]
                                   / lat[0]["per_query_seconds"])
    report["kernel_backends"] = bench_kernel_backends((256, 1024), seed=seed)
    return report
