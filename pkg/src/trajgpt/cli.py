"""Operator surface: generate, pretrain, evaluate, forecast, risk, embed,
ablate, bench.

Every command takes --config <json>; selected flags override config
fields. Reports are machine-readable JSON first (each embeds the tool
version and a hash of the effective run config); human tables render
from them. Exit codes: 0 ok, 1 contract violation, 2 IO/format error,
3 numeric failure.
"""

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__, bench, checkpoint, datagen, inference, model
from .errors import ContractViolation, DataFormatError, NumericFailure


def _load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise DataFormatError(f"config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataFormatError(f"config {path}: invalid JSON ({e.msg})") from e


def _config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _meta(run_cfg: dict) -> dict:
    return {"version": __version__, "config_hash": _config_hash(run_cfg)}


def _write_report(path, report: dict):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=1, sort_keys=True)
        f.write("\n")


def _write_records(path, run_cfg: dict, records):
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"record_type": "meta", **_meta(run_cfg)}) + "\n")
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def _require(cfg: dict, *keys):
    for key in keys:
        if key not in cfg:
            raise ContractViolation(f"config: missing required field {key!r}")


def _model_config(run_cfg: dict, n_codes: int) -> model.ModelConfig:
    fields = {k: run_cfg[k] for k in (
        "d", "heads", "layers", "ff_width", "tau", "theta_base", "time_scale",
        "precision", "decay_gating", "fixed_gamma", "positional", "attention",
        "tie_output") if k in run_cfg}
    return model.ModelConfig.for_codes(n_codes, **fields)


def _load_data(path):
    data = datagen.read_dataset(path)
    return [(seq.tokens, seq.times) for seq in data], data


# ---------------------------------------------------------------------------
# Commands


def cmd_generate(run_cfg: dict) -> int:
    _require(run_cfg, "spec", "n", "seed", "out")
    spec = datagen.load_spec(run_cfg["spec"])
    seed = int(run_cfg["seed"])
    cohort = datagen.generate_cohort(
        spec, int(run_cfg["n"]), int(run_cfg.get("min_len", 60)),
        int(run_cfg.get("max_len", 100)), seed)
    fractions = tuple(run_cfg.get("fractions", (0.8, 0.1, 0.1)))
    train, valid, test = datagen.split(cohort, fractions, seed)
    out = run_cfg["out"]
    os.makedirs(out, exist_ok=True)
    paths = {}
    for name, part in (("train", train), ("valid", valid), ("test", test)):
        paths[name] = os.path.join(out, f"{name}.jsonl")
        datagen.write_dataset(part, paths[name])
    with open(run_cfg["spec"], "rb") as f:
        spec_hash = hashlib.sha256(f.read()).hexdigest()[:16]
    manifest = {
        **_meta(run_cfg), "seed": seed, "spec_hash": spec_hash,
        "counts": {"train": len(train), "valid": len(valid), "test": len(test)},
        "paths": paths,
    }
    _write_report(os.path.join(out, "manifest.json"), manifest)
    print(f"wrote {len(train)}/{len(valid)}/{len(test)} patients to {out}")
    return 0


def cmd_pretrain(run_cfg: dict) -> int:
    _require(run_cfg, "data", "steps", "seed", "checkpoint", "n_codes")
    data, _ = _load_data(run_cfg["data"])
    if not data:
        raise ContractViolation("pretrain: empty training set")
    seed = int(run_cfg["seed"])
    steps = int(run_cfg["steps"])
    hp = model.TrainHyper(
        lr=float(run_cfg.get("lr", 1e-3)), warmup=int(run_cfg.get("warmup", 200)),
        batch_size=int(run_cfg.get("batch_size", 8)))
    ckpt_path = run_cfg["checkpoint"]
    resume = run_cfg.get("resume")
    if resume:
        cfg, params, meta, opt = checkpoint.load_checkpoint(
            resume, expected_precision=run_cfg.get("precision"))
        seed = meta["seed"]
        if opt is None:
            opt = model.init_opt_state(params)
    else:
        cfg = _model_config(run_cfg, int(run_cfg["n_codes"]))
        params = model.init_params(cfg, seed)
        opt = model.init_opt_state(params)
    log_path = run_cfg.get("log")
    log_f = open(log_path, "a", encoding="utf-8") if log_path else None
    every = int(run_cfg.get("checkpoint_every", 0))

    def on_step(step, loss):
        if log_f:
            log_f.write(f"{step} {loss:.6f}\n")
        if every and step % every == 0:
            checkpoint.save_checkpoint(ckpt_path, cfg, params, step, seed, opt)

    remaining = steps - opt.step
    losses = []
    if remaining > 0:
        params, opt, losses = model.pretrain(
            cfg, data, remaining, hp, seed, params=params, opt=opt,
            form=run_cfg.get("form", "parallel"), on_step=on_step)
    checkpoint.save_checkpoint(ckpt_path, cfg, params, opt.step, seed, opt)
    if log_f:
        log_f.close()
    final = losses[-1][1] if losses else float("nan")
    report = {**_meta(run_cfg), "steps": opt.step, "final_loss": final,
              "checkpoint": ckpt_path}
    if run_cfg.get("valid"):
        vdata, _ = _load_data(run_cfg["valid"])
        vloss = _mean_nll(params, cfg, vdata[: int(run_cfg.get("valid_cap", 64))])
        report["valid_loss"] = vloss
    if run_cfg.get("report"):
        _write_report(run_cfg["report"], report)
    print(json.dumps(report))
    return 0


def _mean_nll(params, cfg, data) -> float:
    total, count = 0.0, 0
    for codes, times in data:
        ids, tin, targets = model.prepare_example(codes, times, cfg)
        logits = model.forward(ids, tin, cfg, params)
        total += model.nll_loss(logits[:-1], targets) * len(targets)
        count += len(targets)
    return total / max(count, 1)


def _parse_ks(run_cfg: dict):
    ks = run_cfg.get("ks", [5, 10, 15])
    if isinstance(ks, str):
        ks = [int(x) for x in ks.split(",")]
    return ks


def cmd_evaluate(run_cfg: dict) -> int:
    _require(run_cfg, "checkpoint", "data", "out")
    cfg, params, _, _ = checkpoint.load_checkpoint(
        run_cfg["checkpoint"], expected_precision=run_cfg.get("precision"))
    _, cohort = _load_data(run_cfg["data"])
    ks = _parse_ks(run_cfg)
    window = int(run_cfg.get("window", 50))
    gap_mode = run_cfg.get("gap_mode", "history_only")
    max_targets = run_cfg.get("max_targets")
    absorb = run_cfg.get("absorb", "truth")
    report_body, _ = inference.evaluate_cohort(
        params, cfg, cohort, window, ks, gap_mode,
        None if max_targets is None else int(max_targets), absorb=absorb)
    report = {**_meta(run_cfg), "window": window, "gap_mode": gap_mode,
              **report_body}
    if run_cfg.get("oracle_spec"):
        spec = datagen.load_spec(run_cfg["oracle_spec"])
        report["oracle"] = datagen.oracle_recall(
            spec, cohort, window, ks,
            None if max_targets is None else int(max_targets))
    _write_report(run_cfg["out"], report)
    for mode in ("time_specific", "auto_regressive"):
        row = " ".join(f"{k}={report[mode][f'recall@{k}']:.3f}" for k in ks
                       if report[mode][f"recall@{k}"] is not None)
        print(f"{mode:16s} {row}")
    return 0


def cmd_forecast(run_cfg: dict) -> int:
    _require(run_cfg, "checkpoint", "data", "out")
    cfg, params, _, _ = checkpoint.load_checkpoint(
        run_cfg["checkpoint"], expected_precision=run_cfg.get("precision"))
    _, cohort = _load_data(run_cfg["data"])
    window = int(run_cfg.get("window", 50))
    k = int(run_cfg.get("k", 10))
    mode = run_cfg.get("inference", "time")
    gap_mode = run_cfg.get("gap_mode", "history_only")
    max_targets = run_cfg.get("max_targets")
    key = "rows_time_specific" if mode == "time" else "rows_auto_regressive"
    records = []
    for seq in cohort:
        rec = inference.forecast_patient(
            params, cfg, seq, window, gap_mode,
            None if max_targets is None else int(max_targets))
        if rec is None:
            continue
        rows = rec[key]
        topk = [datagen.rank_topk(r, k).tolist() for r in rows]
        recall = float(np.mean([int(t in tk) for t, tk in zip(rec["truth"], topk)]))
        records.append({"id": rec["id"], "target_times": rec["target_times"],
                        "topk": topk, "truth": rec["truth"], "recall": recall})
    _write_records(run_cfg["out"], run_cfg, records)
    print(f"forecast written for {len(records)} patients ({mode})")
    return 0


def cmd_risk(run_cfg: dict) -> int:
    _require(run_cfg, "checkpoint", "data", "out", "code")
    cfg, params, _, _ = checkpoint.load_checkpoint(
        run_cfg["checkpoint"], expected_precision=run_cfg.get("precision"))
    _, cohort = _load_data(run_cfg["data"])
    code = int(run_cfg["code"])
    pre = float(run_cfg.get("pre_years", 5.0))
    post = float(run_cfg.get("post_years", 5.0))
    step = float(run_cfg.get("step", 0.5))
    gap_mode = run_cfg.get("gap_mode", "history_only")
    cap = run_cfg.get("max_patients")
    records = []
    for seq in cohort[: int(cap) if cap else len(cohort)]:
        grid = np.arange(seq.times[0] - pre, seq.times[-1] + post + step / 2, step)
        traj = inference.risk_trajectory(params, cfg, seq, code, grid, gap_mode)
        records.append({"id": seq.pid, "code": code, "grid": traj.grid.tolist(),
                        "risk": traj.risk.tolist(), "growth": traj.growth.tolist()})
    _write_records(run_cfg["out"], run_cfg, records)
    print(f"risk trajectories written for {len(records)} patients (code {code})")
    return 0


def cmd_embed(run_cfg: dict) -> int:
    _require(run_cfg, "checkpoint", "data", "out")
    cfg, params, _, _ = checkpoint.load_checkpoint(
        run_cfg["checkpoint"], expected_precision=run_cfg.get("precision"))
    _, cohort = _load_data(run_cfg["data"])
    trigger = run_cfg.get("trigger_code")
    records = []
    for seq in cohort:
        if trigger is not None:
            hits = np.nonzero(seq.tokens == int(trigger))[0]
            if hits.size == 0:
                continue
            truncate_at = int(hits[0]) + 1  # keep the anchoring record itself
        else:
            truncate_at = len(seq)
        emb = inference.sequence_embedding(params, cfg, seq, truncate_at)
        records.append({"id": seq.pid, "embedding": [float(x) for x in emb],
                        "truncate_at": truncate_at, "labels": seq.labels})
    _write_records(run_cfg["out"], run_cfg, records)
    print(f"embeddings written for {len(records)} patients")
    return 0


ABLATION_VARIANTS = (
    ("full", {}),
    ("fixed_gamma", {"decay_gating": "fixed"}),
    ("fixed_gamma_absolute_pe", {"decay_gating": "fixed", "positional": "absolute"}),
    ("gpt2_softmax", {"decay_gating": "fixed", "positional": "absolute",
                      "attention": "softmax_gpt2"}),
)


def run_ablation(run_cfg: dict) -> dict:
    """Train the four ablation variants under identical budgets and seeds."""
    _require(run_cfg, "data", "test", "steps", "seed", "n_codes")
    data, _ = _load_data(run_cfg["data"])
    _, test_cohort = _load_data(run_cfg["test"])
    seeds = run_cfg.get("seeds") or [int(run_cfg["seed"])]
    k = int(run_cfg.get("k", 10))
    window = int(run_cfg.get("window", 50))
    steps = int(run_cfg["steps"])
    max_targets = run_cfg.get("max_targets")
    max_targets = None if max_targets is None else int(max_targets)
    hp = model.TrainHyper(
        lr=float(run_cfg.get("lr", 1e-3)), warmup=int(run_cfg.get("warmup", 200)),
        batch_size=int(run_cfg.get("batch_size", 8)))
    rows = []
    for name, overrides in ABLATION_VARIANTS:
        for seed in seeds:
            cfg = _model_config({**run_cfg, **overrides}, int(run_cfg["n_codes"]))
            params, opt, _ = model.pretrain(cfg, data, steps, hp, int(seed))
            if cfg.attention == "softmax_gpt2":
                ar = _softmax_ar_recall(params, cfg, test_cohort, window, k, max_targets)
                rows.append({"variant": name, "seed": int(seed),
                             "time_specific": None, "auto_regressive": ar})
            else:
                # forecast-task protocol: window-end time-specific queries
                # vs a unit-step rollout baseline
                rep, _ = inference.evaluate_cohort(
                    params, cfg, test_cohort, window, [k],
                    run_cfg.get("gap_mode", "history_only"), max_targets,
                    absorb="rollout")
                rows.append({"variant": name, "seed": int(seed),
                             "time_specific": rep["time_specific"][f"recall@{k}"],
                             "auto_regressive": rep["auto_regressive"][f"recall@{k}"]})
    table = {}
    for name, _ in ABLATION_VARIANTS:
        sel = [r for r in rows if r["variant"] == name]
        table[name] = {
            "time_specific": (None if sel[0]["time_specific"] is None else
                              float(np.median([r["time_specific"] for r in sel]))),
            "auto_regressive": float(np.median([r["auto_regressive"] for r in sel])),
        }
    return {"k": k, "window": window, "steps": steps, "seeds": list(map(int, seeds)),
            "runs": rows, "median": table}


def _softmax_ar_recall(params, cfg, cohort, window, k, max_targets,
                       horizon_cap=64):
    """Rollout auto-regressive recall for the softmax variant (no peek)."""
    hits = []
    for seq in cohort:
        if len(seq) <= window + 1:
            continue
        n_targets = len(seq) - window
        if max_targets is not None:
            n_targets = min(n_targets, max_targets)
        prefix = datagen.IrregularSequence(
            seq.pid, seq.tokens[:window].copy(), seq.times[:window].copy())
        target_times = seq.times[window:window + n_targets]
        t_end = float(prefix.times[-1])
        horizon = int(np.clip(np.ceil(target_times[-1] - t_end), 1, horizon_cap))
        rows, _, _ = inference.autoregressive_rows(params, cfg, prefix, horizon)
        steps = np.clip(np.round(target_times - t_end).astype(int), 1, horizon)
        for j in range(n_targets):
            truth = int(seq.tokens[window + j])
            hits.append(int(truth in datagen.rank_topk(rows[steps[j] - 1], k)))
    return float(np.mean(hits)) if hits else None


def cmd_ablate(run_cfg: dict) -> int:
    report = {**_meta(run_cfg), **run_ablation(run_cfg)}
    if run_cfg.get("out"):
        _write_report(run_cfg["out"], report)
    print(f"{'variant':26s} {'time_specific':>14s} {'auto_regressive':>16s}")
    for name, row in report["median"].items():
        ts = "---" if row["time_specific"] is None else f"{row['time_specific']:.3f}"
        print(f"{name:26s} {ts:>14s} {row['auto_regressive']:>16.3f}")
    return 0


def cmd_bench(run_cfg: dict) -> int:
    lengths = tuple(run_cfg.get("lengths", (256, 512, 1024, 2048)))
    histories = tuple(run_cfg.get("histories", (512, 2048)))
    report = {**_meta(run_cfg),
              **bench.run_bench(lengths, histories,
                                repeats=int(run_cfg.get("repeats", 3)),
                                seed=int(run_cfg.get("seed", 0)))}
    if run_cfg.get("out"):
        _write_report(run_cfg["out"], report)
    for variant in ("recurrent", "parallel", "softmax"):
        ratios = ", ".join(f"{r['n']}: {r['ratio']:.2f}"
                           for r in report[variant]["doubling"])
        print(f"{variant:10s} doubling ratios: {ratios}")
    if "latency_ratio" in report:
        print(f"time-specific latency ratio (history x{histories[-1] // histories[0]}): "
              f"{report['latency_ratio']:.2f}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "evaluate": cmd_evaluate,
    "forecast": cmd_forecast,
    "risk": cmd_risk,
    "embed": cmd_embed,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
}

_PRECISION_FLAGS = {"f32": "single", "f64": "double"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajgpt",
                                     description="irregular-sequence trajectory model")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the run config JSON")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--checkpoint")
        p.add_argument("--precision", choices=sorted(_PRECISION_FLAGS))
        p.add_argument("--inference", choices=["auto", "time"])
        p.add_argument("--gap-mode", choices=["history", "full"])
        p.add_argument("--k", help="comma-separated recall cutoffs, e.g. 5,10,15")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run_cfg = _load_config(args.config)
        if args.seed is not None:
            run_cfg["seed"] = args.seed
        if args.out is not None:
            run_cfg["out"] = args.out
        if args.checkpoint is not None:
            run_cfg["checkpoint"] = args.checkpoint
        if args.precision is not None:
            run_cfg["precision"] = _PRECISION_FLAGS[args.precision]
        if args.inference is not None:
            run_cfg["inference"] = args.inference
        if args.gap_mode is not None:
            run_cfg["gap_mode"] = {"history": "history_only", "full": "full"}[args.gap_mode]
        if args.k is not None:
            run_cfg["ks"] = [int(x) for x in args.k.split(",")]
            run_cfg["k"] = run_cfg["ks"][0]
        return COMMANDS[args.command](run_cfg)
    except ContractViolation as e:
        print(f"contract violation: {e}", file=sys.stderr)
        return 1
    except DataFormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 2
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
