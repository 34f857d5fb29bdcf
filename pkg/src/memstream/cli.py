"""Command-line front end: verify, simulate, ablate, sweep-k.

Configs are strict JSON (unknown keys are rejected, see README for the
schema); outputs are byte-stable CSV / JSON-lines with reals printed at 17
significant digits so every float round-trips. Wall-clock columns are
written as 0 unless --timing real is given, keeping default outputs
deterministic.

Exit codes: 0 success, 1 verification failure, 2 config/usage error,
3 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import ConfigError, DivergenceError, EngineError
from .gates import UpdateRule, Variant, Writeback
from .harness import (
    GatePlacement,
    GaussianSource,
    KeyRecallSource,
    RevisitSource,
    RunSummary,
    StepTrace,
    StreamConfig,
    TraceLevel,
    equivalence_suite,
    run_stream,
)
from .routing import Features, PatchPartition, Policy, RoutingPlan, Score, default_plan

SUMMARY_HEADER = (
    "run_id,rule,policy,score_fn,feature_source,writeback,k,n,d,L,H,T,"
    "seed_w,seed_s,coverage,update_cv,update_entropy,final_drift,"
    "steps_per_sec,peak_state_bytes"
)
COUNTS_HEADER = "run_id,token_index,update_count"


@dataclass(frozen=True)
class ExperimentConfig:
    stream: StreamConfig
    out_dir: str
    comparison: tuple[dict, ...] | None
    sweep: dict | None


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _reject_unknown(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown key '{sorted(unknown)[0]}'")


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ConfigError(f"{where}: missing required key '{key}'")
    return obj[key]


def _as_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    return value


def _as_enum(enum_cls, value, where: str):
    try:
        return enum_cls(value)
    except ValueError:
        options = ", ".join(e.value for e in enum_cls)
        raise ConfigError(f"{where}: '{value}' is not one of: {options}") from None


def _parse_rule(obj, where: str) -> UpdateRule:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    _reject_unknown(obj, {"variant", "writeback"}, where)
    variant = _as_enum(Variant, _require(obj, "variant", where), f"{where}.variant")
    writeback = _as_enum(
        Writeback, obj.get("writeback", "none" if variant is Variant.FREEZE else "single"),
        f"{where}.writeback",
    )
    try:
        return UpdateRule(variant, writeback)
    except EngineError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _parse_plan(obj, n: int, where: str) -> RoutingPlan:
    base = default_plan(n)
    if obj is None:
        return base
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    _reject_unknown(obj, {"score", "features", "policy", "k", "patch_size"}, where)
    patch_size = _as_int(obj.get("patch_size", 1), f"{where}.patch_size")
    try:
        return RoutingPlan(
            score=_as_enum(Score, obj.get("score", base.score.value), f"{where}.score"),
            features=_as_enum(
                Features, obj.get("features", base.features.value), f"{where}.features"
            ),
            policy=_as_enum(
                Policy, obj.get("policy", base.policy.value), f"{where}.policy"
            ),
            k=_as_int(obj.get("k", base.k), f"{where}.k"),
            partition=PatchPartition(n, patch_size),
        )
    except EngineError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _parse_source(obj, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    variant = _require(obj, "variant", where)
    if variant == "gaussian":
        _reject_unknown(obj, {"variant"}, where)
        return GaussianSource()
    if variant == "revisit":
        _reject_unknown(obj, {"variant", "scenes", "schedule"}, where)
        schedule = obj.get("schedule")
        return RevisitSource(
            scenes=_as_int(_require(obj, "scenes", where), f"{where}.scenes"),
            schedule=tuple(schedule) if schedule is not None else None,
        )
    if variant == "key_recall":
        _reject_unknown(obj, {"variant", "write_step", "probe_after"}, where)
        return KeyRecallSource(
            write_step=_as_int(_require(obj, "write_step", where), f"{where}.write_step"),
            probe_after=_as_int(_require(obj, "probe_after", where), f"{where}.probe_after"),
        )
    raise ConfigError(f"{where}.variant: '{variant}' is not one of: gaussian, revisit, key_recall")


_TOP_KEYS = {
    "n", "d", "m", "L", "H", "T", "weights_seed", "stream_seed", "rule",
    "plan", "gate_placement", "source", "trace_level", "raw_logits",
    "beta_on_attention", "out_dir", "comparison", "sweep",
}


def parse_experiment(obj: dict) -> ExperimentConfig:
    """Validate a top-level config object; field-level errors name the key."""
    if not isinstance(obj, dict):
        raise ConfigError("config: top level must be an object")
    _reject_unknown(obj, _TOP_KEYS, "config")
    n = _as_int(_require(obj, "n", "config"), "config.n")
    dims = {k: _as_int(_require(obj, k, "config"), f"config.{k}") for k in ("d", "m", "L", "H", "T")}
    rule = _parse_rule(_require(obj, "rule", "config"), "config.rule")
    plan = _parse_plan(obj.get("plan"), n, "config.plan")
    source = _parse_source(_require(obj, "source", "config"), "config.source")
    placement = _as_enum(
        GatePlacement,
        _require(obj, "gate_placement", "config"),
        "config.gate_placement",
    )
    trace = _as_enum(TraceLevel, obj.get("trace_level", "off"), "config.trace_level")
    for flag in ("raw_logits", "beta_on_attention"):
        if flag in obj and not isinstance(obj[flag], bool):
            raise ConfigError(f"config.{flag}: expected a boolean")
    try:
        stream = StreamConfig(
            n=n,
            d=dims["d"],
            m=dims["m"],
            layers=dims["L"],
            heads=dims["H"],
            steps=dims["T"],
            weights_seed=_as_int(_require(obj, "weights_seed", "config"), "config.weights_seed"),
            stream_seed=_as_int(_require(obj, "stream_seed", "config"), "config.stream_seed"),
            rule=rule,
            plan=plan,
            gate_placement=placement,
            source=source,
            trace_level=trace,
            raw_logits=obj.get("raw_logits", False),
            beta_on_attention=obj.get("beta_on_attention", False),
        )
    except EngineError as exc:
        raise ConfigError(f"config: {exc}") from None
    comparison = obj.get("comparison")
    if comparison is not None:
        if not isinstance(comparison, list) or not comparison:
            raise ConfigError("config.comparison: expected a non-empty list")
        comparison = tuple(comparison)
    sweep = obj.get("sweep")
    if sweep is not None and not isinstance(sweep, dict):
        raise ConfigError("config.sweep: expected an object")
    return ExperimentConfig(
        stream=stream,
        out_dir=obj.get("out_dir", "out"),
        comparison=comparison,
        sweep=sweep,
    )


def experiment_to_dict(exp: ExperimentConfig) -> dict:
    """Canonical serialized form; parse_experiment() of this is lossless."""
    cfg = exp.stream
    src = cfg.source
    if isinstance(src, GaussianSource):
        source = {"variant": "gaussian"}
    elif isinstance(src, RevisitSource):
        source = {"variant": "revisit", "scenes": src.scenes}
        if src.schedule is not None:
            source["schedule"] = list(src.schedule)
    else:
        source = {
            "variant": "key_recall",
            "write_step": src.write_step,
            "probe_after": src.probe_after,
        }
    out = {
        "n": cfg.n,
        "d": cfg.d,
        "m": cfg.m,
        "L": cfg.layers,
        "H": cfg.heads,
        "T": cfg.steps,
        "weights_seed": cfg.weights_seed,
        "stream_seed": cfg.stream_seed,
        "rule": {"variant": cfg.rule.variant.value, "writeback": cfg.rule.writeback.value},
        "plan": {
            "score": cfg.plan.score.value,
            "features": cfg.plan.features.value,
            "policy": cfg.plan.policy.value,
            "k": cfg.plan.k,
            "patch_size": cfg.plan.partition.patch_size,
        },
        "gate_placement": cfg.gate_placement.value,
        "source": source,
        "trace_level": cfg.trace_level.value,
        "raw_logits": cfg.raw_logits,
        "beta_on_attention": cfg.beta_on_attention,
        "out_dir": exp.out_dir,
    }
    if exp.comparison is not None:
        out["comparison"] = [dict(v) for v in exp.comparison]
    if exp.sweep is not None:
        out["sweep"] = dict(exp.sweep)
    return out


def apply_overrides(stream: StreamConfig, patch: dict, where: str) -> StreamConfig:
    """Apply one comparison-block entry (partial rule/plan/placement/flags)."""
    if not isinstance(patch, dict):
        raise ConfigError(f"{where}: expected an object")
    _reject_unknown(
        patch,
        {"rule", "plan", "gate_placement", "raw_logits", "beta_on_attention"},
        where,
    )
    updates = {}
    if "rule" in patch:
        updates["rule"] = _parse_rule(patch["rule"], f"{where}.rule")
    if "plan" in patch:
        merged = {
            "score": stream.plan.score.value,
            "features": stream.plan.features.value,
            "policy": stream.plan.policy.value,
            "k": stream.plan.k,
            "patch_size": stream.plan.partition.patch_size,
        }
        if not isinstance(patch["plan"], dict):
            raise ConfigError(f"{where}.plan: expected an object")
        merged.update(patch["plan"])
        updates["plan"] = _parse_plan(merged, stream.n, f"{where}.plan")
    if "gate_placement" in patch:
        updates["gate_placement"] = _as_enum(
            GatePlacement, patch["gate_placement"], f"{where}.gate_placement"
        )
    for flag in ("raw_logits", "beta_on_attention"):
        if flag in patch:
            if not isinstance(patch[flag], bool):
                raise ConfigError(f"{where}.{flag}: expected a boolean")
            updates[flag] = patch[flag]
    try:
        return replace(stream, **updates)
    except EngineError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def run_id_for(cfg: StreamConfig) -> str:
    return (
        f"{cfg.rule.variant.value}-{cfg.rule.writeback.value}"
        f"-{cfg.plan.policy.value}-{cfg.plan.score.value}-{cfg.plan.features.value}"
        f"-{cfg.gate_placement.value}"
        f"-n{cfg.n}-d{cfg.d}-L{cfg.layers}-H{cfg.heads}-T{cfg.steps}"
        f"-k{cfg.plan.k}-p{cfg.plan.partition.patch_size}"
        f"-w{cfg.weights_seed}-s{cfg.stream_seed}"
    )


def summary_row(summary: RunSummary, timing: bool) -> str:
    cfg = summary.config
    sps = summary.steps_per_sec if timing else 0.0
    fields = [
        run_id_for(cfg),
        cfg.rule.variant.value,
        cfg.plan.policy.value,
        cfg.plan.score.value,
        cfg.plan.features.value,
        cfg.rule.writeback.value,
        str(cfg.plan.k),
        str(cfg.n),
        str(cfg.d),
        str(cfg.layers),
        str(cfg.heads),
        str(cfg.steps),
        str(cfg.weights_seed),
        str(cfg.stream_seed),
        _fmt(summary.coverage),
        _fmt(summary.update_count_cv),
        _fmt(summary.update_count_entropy),
        _fmt(summary.final_drift),
        _fmt(sps),
        str(summary.peak_state_bytes),
    ]
    return ",".join(fields)


def write_summary_csv(path: Path, summaries: list[RunSummary], timing: bool) -> None:
    lines = [SUMMARY_HEADER] + [summary_row(s, timing) for s in summaries]
    path.write_text("\n".join(lines) + "\n")


def write_counts_csv(path: Path, summaries: list[RunSummary]) -> None:
    lines = [COUNTS_HEADER]
    for s in summaries:
        rid = run_id_for(s.config)
        for i, c in enumerate(s.update_counts):
            lines.append(f"{rid},{i},{int(c)}")
    path.write_text("\n".join(lines) + "\n")


def _jsonl_step(tr: StepTrace, timing: bool) -> str:
    def arr(v, fmt):
        return "null" if v is None else "[" + ",".join(fmt(x) for x in v) + "]"

    def opt(v):
        return "null" if v is None else _fmt(v)

    wall = tr.wall_time_ns if timing else 0
    return (
        "{"
        f'"t":{tr.t},'
        f'"scores":{arr(tr.scores, _fmt)},'
        f'"selected_patches":{arr(tr.selected_patches, str)},'
        f'"realized_gate":{arr(tr.realized_gate, _fmt)},'
        f'"state_delta_norm":{_fmt(tr.state_delta_norm)},'
        f'"update_counts":{arr(tr.update_counts, lambda x: str(int(x)))},'
        f'"retention_error":{opt(tr.retention_error)},'
        f'"retention_error_full":{opt(tr.retention_error_full)},'
        f'"wall_time_ns":{wall},'
        f'"peak_state_bytes":{tr.peak_state_bytes}'
        "}"
    )


def write_trace_jsonl(path: Path, traces: list[StepTrace], timing: bool) -> None:
    path.write_text("".join(_jsonl_step(t, timing) + "\n" for t in traces))


def _load_experiment(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid JSON: {exc}") from None
    return parse_experiment(raw)


def _resolve_run(exp: ExperimentConfig, args) -> tuple[StreamConfig, Path]:
    stream = exp.stream
    if args.trace is not None:
        stream = replace(stream, trace_level=TraceLevel(args.trace))
    out_dir = Path(args.out if args.out is not None else exp.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return stream, out_dir


def _emit(out_dir: Path, summaries, traces, timing: bool, level: TraceLevel) -> None:
    write_summary_csv(out_dir / "summary.csv", summaries, timing)
    if level in (TraceLevel.SUMMARY, TraceLevel.FULL):
        write_counts_csv(out_dir / "counts.csv", summaries)
    if level is TraceLevel.FULL and traces is not None:
        write_trace_jsonl(out_dir / "trace.jsonl", traces, timing)


def cmd_verify(args) -> int:
    report = equivalence_suite(args.seed, args.trials, inject_fault=args.negative_control)
    for check in report.checks:
        status = "PASS" if check.failures == 0 else "FAIL"
        line = (
            f"{status}  {check.name}: {check.trials - check.failures}/{check.trials}"
            f"  max_dev={check.max_deviation:.3e}"
        )
        if check.first_failure_seed is not None:
            line += f"  first_failure_seed={check.first_failure_seed}"
        print(line)
    if report.passed:
        print(f"all {len(report.checks)} checks passed over {report.trials} trials")
        return 0
    print(f"{report.total_failures} failure(s) over {report.trials} trials")
    return 1


def cmd_simulate(args) -> int:
    exp = _load_experiment(args.config)
    stream, out_dir = _resolve_run(exp, args)
    summary, traces = run_stream(stream)
    _emit(out_dir, [summary], traces, args.timing == "real", stream.trace_level)
    print(f"wrote {out_dir / 'summary.csv'} ({run_id_for(stream)})")
    return 0


def cmd_ablate(args) -> int:
    exp = _load_experiment(args.config)
    if exp.comparison is None:
        raise ConfigError("config.comparison: ablate needs a comparison block")
    stream, out_dir = _resolve_run(exp, args)
    summaries = []
    for i, patch in enumerate(exp.comparison):
        variant_cfg = apply_overrides(stream, patch, f"config.comparison[{i}]")
        summary, _ = run_stream(variant_cfg)
        summaries.append(summary)
    _emit(out_dir, summaries, None, args.timing == "real", stream.trace_level)
    print(f"wrote {out_dir / 'summary.csv'} ({len(summaries)} variants)")
    return 0


def _sweep_values(sweep: dict) -> list[int]:
    _reject_unknown(sweep, {"values", "start", "stop", "step"}, "config.sweep")
    if "values" in sweep:
        if not isinstance(sweep["values"], list) or not sweep["values"]:
            raise ConfigError("config.sweep.values: expected a non-empty list")
        return [_as_int(v, "config.sweep.values") for v in sweep["values"]]
    start = _as_int(_require(sweep, "start", "config.sweep"), "config.sweep.start")
    stop = _as_int(_require(sweep, "stop", "config.sweep"), "config.sweep.stop")
    step = _as_int(_require(sweep, "step", "config.sweep"), "config.sweep.step")
    if step < 1 or stop < start:
        raise ConfigError("config.sweep: need step >= 1 and stop >= start")
    if (stop - start) % step != 0:
        raise ConfigError(f"config.sweep: step {step} does not divide range {stop - start}")
    return list(range(start, stop + 1, step))


def cmd_sweep_k(args) -> int:
    exp = _load_experiment(args.config)
    if exp.sweep is None:
        raise ConfigError("config.sweep: sweep-k needs a sweep block")
    stream, out_dir = _resolve_run(exp, args)
    summaries = []
    for k in _sweep_values(exp.sweep):
        try:
            plan = replace(stream.plan, k=k)
            cfg = replace(stream, plan=plan)
        except EngineError as exc:
            raise ConfigError(f"config.sweep: k={k}: {exc}") from None
        summary, _ = run_stream(cfg)
        summaries.append(summary)
    _emit(out_dir, summaries, None, args.timing == "real", stream.trace_level)
    print(f"wrote {out_dir / 'summary.csv'} ({len(summaries)} k values)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memstream",
        description="streaming recurrent-memory engine: verify, simulate, ablate, sweep-k",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_verify = sub.add_parser("verify", help="run the randomized equivalence suite")
    p_verify.add_argument("--seed", type=int, default=1)
    p_verify.add_argument("--trials", type=int, default=100)
    p_verify.add_argument(
        "--negative-control",
        action="store_true",
        help="inject one deliberate violation (self-test; exits 1)",
    )

    for name, fn in (("simulate", cmd_simulate), ("ablate", cmd_ablate), ("sweep-k", cmd_sweep_k)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--out", metavar="DIR", default=None)
        p.add_argument("--trace", choices=[t.value for t in TraceLevel], default=None)
        p.add_argument(
            "--timing",
            choices=["off", "real"],
            default="off",
            help="'real' writes measured timing (breaks byte-stability)",
        )
        p.set_defaults(func=fn)
    p_verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "verify" and args.trials < 1:
        parser.error("--trials must be >= 1")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: numerical divergence at step {exc.step}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
