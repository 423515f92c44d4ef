"""Command-line interface: dataset runs, analytic verification, trace replay.

Subcommands:
  run      drive a dataset through the gate + scaling loop, print metrics
  verify   run the analytic-guarantee experiment suite, print bound reports
  replay   sweep gate thresholds over a recorded trace (no re-generation)
  report   summarize a recorded trace

Exit codes are stable for scripting: 0 success, 2 configuration error,
3 data/trace error, 4 backend error.  Flags override config-file values,
which override built-in defaults; the JSON config file mirrors the run
configuration schema (keys: alpha, gamma, tau, policy, strategy, n,
critic_rounds, temperature, max_steps, max_step_tokens, samples, seed,
concurrency, endpoint, model, script, scorer_endpoint, critic_endpoint).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import theory
from .backend import BackendDescriptor, HttpBackend, MockScript
from .errors import (
    BackendError,
    ConfigError,
    InsufficientTrialsError,
    MugateError,
    TraceSchemaError,
)
from .harness import (
    RunConfig,
    StrategyClients,
    load_dataset,
    mock_factories,
    read_trace,
    render_metrics,
    replay_gating,
    run_dataset,
    trace_m_sequences,
    write_trace,
)
from .strategies import HttpCritic, HttpScorer
from .uncertainty import ScalePolicy

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_BACKEND = 4

POLICY_CHOICES = ("mur", "avg", "tlc", "per-step", "never", "random")
STRATEGY_CHOICES = ("bon", "critic", "think")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mugate",
        description="Momentum-uncertainty gated test-time scaling for stepwise reasoning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a dataset through the gated loop")
    run.add_argument("--dataset", required=True, help="JSONL of {id, question, answer}")
    run.add_argument("--backend", choices=("http", "mock"), default="mock")
    run.add_argument("--endpoint", default=None, help="completions endpoint URL (http)")
    run.add_argument("--model", default=None, help="model name for http requests")
    run.add_argument("--script", default=None, help="mock script JSONL (mock backend)")
    run.add_argument("--policy", choices=POLICY_CHOICES, default=None)
    run.add_argument("--gamma", type=float, default=None, help="gate rate in (0,1), default 0.9")
    run.add_argument("--alpha", type=float, default=None, help="momentum rate in (0,1), default 0.9")
    run.add_argument("--tau", type=float, default=None, help="confidence threshold, default 0.8")
    run.add_argument("--strategy", choices=STRATEGY_CHOICES, default=None)
    run.add_argument("--n", type=int, default=None, help="candidates for best-of-n, default 3")
    run.add_argument("--temperature", type=float, default=None, help="default 0.6")
    run.add_argument("--max-steps", type=int, default=None, help="step cap, default 30")
    run.add_argument("--samples", type=int, default=None, help="samples per query, default 1")
    run.add_argument("--seed", type=int, default=None, help="master seed, default 0")
    run.add_argument("--random-count", type=int, default=None, help="steps per trajectory for random policy")
    run.add_argument("--random-rate", type=float, default=None, help="per-step rate for random policy")
    run.add_argument("--trace-out", default=None, help="write a trace file here")
    run.add_argument("--concurrency", type=int, default=None, help="parallel samples, default 1")
    run.add_argument("--config", default=None, help="JSON config file (flags override it)")

    verify = sub.add_parser("verify", help="run the analytic verification suite")
    verify.add_argument("--trials", type=int, default=200_000, help="Monte Carlo trials, default 200000")
    verify.add_argument("--seed", type=int, default=0, help="master seed, default 0")
    verify.add_argument("--csv", default=None, help="also write reports to this CSV file")
    verify.add_argument("--quick", action="store_true", help="smaller grids (development aid)")

    replay = sub.add_parser("replay", help="sweep gate rates over a recorded trace")
    replay.add_argument("--trace", required=True, help="trace file from a previous run")
    replay.add_argument(
        "--gammas",
        default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9",
        help="comma-separated gate rates to sweep",
    )
    replay.add_argument("--alpha", type=float, default=None, help="override momentum rate")

    report = sub.add_parser("report", help="summarize a recorded trace")
    report.add_argument("--trace", required=True, help="trace file from a previous run")
    return parser


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def _merged(args: argparse.Namespace, file_cfg: dict) -> dict:
    """Flags override config file values override defaults."""
    defaults = {
        "policy": "mur",
        "gamma": 0.9,
        "alpha": 0.9,
        "tau": 0.8,
        "strategy": "bon",
        "n": 3,
        "critic_rounds": 1,
        "temperature": 0.6,
        "max_steps": 30,
        "max_step_tokens": 512,
        "samples": 1,
        "seed": 0,
        "concurrency": 1,
        "backend": "mock",
        "endpoint": None,
        "model": None,
        "script": None,
        "scorer_endpoint": None,
        "critic_endpoint": None,
        "random_count": None,
        "random_rate": None,
    }
    merged = dict(defaults)
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config file keys: {sorted(unknown)}")
    merged.update(file_cfg)
    for key in defaults:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
    return merged


def _build_policy(cfg: dict) -> ScalePolicy:
    kind = cfg["policy"]
    try:
        if kind == "mur":
            if not (0.0 < cfg["gamma"] < 1.0):
                raise ConfigError(f"gamma must lie in (0, 1), got {cfg['gamma']}")
            return ScalePolicy.mur(cfg["gamma"])
        if kind == "avg":
            return ScalePolicy.avg_uncertainty()
        if kind == "tlc":
            return ScalePolicy.tlc_threshold(cfg["tau"])
        if kind == "per-step":
            return ScalePolicy.per_step()
        if kind == "never":
            return ScalePolicy.never()
        return ScalePolicy.random(count=cfg["random_count"], rate=cfg["random_rate"])
    except ValueError as exc:
        raise ConfigError(str(exc))


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _merged(args, _load_config_file(args.config))
    policy = _build_policy(cfg)
    try:
        descriptor = BackendDescriptor(
            kind=cfg["backend"], endpoint_url=cfg["endpoint"], model_name=cfg["model"]
        )
        config = RunConfig(
            alpha=cfg["alpha"],
            policy=policy,
            strategy=cfg["strategy"],
            n=cfg["n"],
            critic_rounds=cfg["critic_rounds"],
            backend=descriptor,
            temperature=cfg["temperature"],
            max_steps=cfg["max_steps"],
            max_step_tokens=cfg["max_step_tokens"],
            samples_per_query=cfg["samples"],
            master_seed=cfg["seed"],
            concurrency=cfg["concurrency"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc))

    try:
        items = load_dataset(cfg["dataset"] if "dataset" in cfg else args.dataset)
    except OSError as exc:
        print(f"error: cannot read dataset: {exc}", file=sys.stderr)
        return EXIT_DATA

    if descriptor.kind == "mock":
        if not cfg["script"]:
            raise ConfigError("mock backend requires --script")
        try:
            script = MockScript.load(cfg["script"])
        except OSError as exc:
            print(f"error: cannot read script: {exc}", file=sys.stderr)
            return EXIT_DATA
        backend_factory, clients_factory = mock_factories(script)
    else:
        http_backend = HttpBackend(descriptor)
        scorer = HttpScorer(cfg["scorer_endpoint"]) if cfg["scorer_endpoint"] else None
        critic = HttpCritic(cfg["critic_endpoint"]) if cfg["critic_endpoint"] else None
        if config.strategy == "bon" and scorer is None:
            raise ConfigError("http guided search requires scorer_endpoint in the config file")
        if config.strategy == "critic" and critic is None:
            raise ConfigError("http critic refinement requires critic_endpoint in the config file")

        def backend_factory(item):  # noqa: ANN001
            return http_backend

        def clients_factory(backend):  # noqa: ANN001
            return StrategyClients(scorer=scorer, critic=critic)

    metrics, results = run_dataset(items, config, backend_factory, clients_factory)
    print(render_metrics(metrics))
    print(json.dumps({"record": "metrics", **metrics.__dict__}, sort_keys=True))
    if args.trace_out:
        write_trace(args.trace_out, config, results)
        print(f"trace written to {args.trace_out}")
    return EXIT_OK


def _verify_reports(trials: int, seed: int, quick: bool) -> list[theory.BoundReport]:
    reports: list[theory.BoundReport] = []

    reports.append(theory.closed_form_equivalence_check(1000, 100, seed))

    rng_residual = theory.gradient_form_identity(
        [1.0, 0.5, 0.7, 0.2, 1.4, 0.9, 0.3, 1.1, 0.6, 0.8], 0.9
    )
    reports.append(
        theory.BoundReport(
            experiment="gradient_form_identity",
            parameters={"alpha": 0.9, "length": 10},
            analytic_bound=1e-10,
            empirical_value=rng_residual,
            trials=1,
            satisfied=rng_residual <= 1e-10,
        )
    )

    reports.append(theory.empirical_variance_experiment(0.9, 20, 1.0, trials, seed))

    grid_trials = max(theory.MIN_TRIALS_VARIANCE, trials // 4)
    alphas = [0.5, 0.9] if quick else [round(0.1 * k, 1) for k in range(1, 10)]
    ts = [1, 5, 20] if quick else list(range(1, 21))
    reports.extend(theory.variance_grid_experiment(alphas, ts, 1.0, grid_trials, seed + 1))

    bias_trials = max(theory.MIN_TRIALS_BIAS, trials // 4)
    drift = theory.DriftModel(mu_infinity=1.0, D=1.0, beta=0.5, t_max=30)
    reports.extend(theory.bias_bound_experiment(drift, 0.9, 0.1, bias_trials, seed + 2))

    coeff = theory.misfire_exponent_coefficient(0.9)
    reports.append(
        theory.BoundReport(
            experiment="misfire_exponent",
            parameters={"alpha": 0.9},
            analytic_bound=38.0,
            empirical_value=coeff,
            trials=1,
            satisfied=abs(coeff - 38.0) <= 1e-9,
        )
    )
    for t in (5, 10, 20):
        reports.append(
            theory.misfire_bound_experiment(
                0.9, 0.9, t, m_current=0.9, trials=max(trials, theory.MIN_TRIALS_MISFIRE), seed=seed + 3
            )
        )

    for alpha, t, expect_lower in ((0.99, 20, True), (0.9, 20, False), (0.9, 4, True)):
        cmp = theory.compare_momentum_vs_average(alpha, t)
        reports.append(
            theory.BoundReport(
                experiment="momentum_vs_average",
                parameters={"alpha": alpha, "t": t, "expected_lower": float(expect_lower)},
                analytic_bound=cmp.average_coeff,
                empirical_value=cmp.momentum_coeff,
                trials=1,
                satisfied=cmp.momentum_lower == expect_lower,
            )
        )
    return reports


def _print_region_map() -> None:
    alphas = [0.5, 0.8, 0.9, 0.95, 0.99]
    ts = [1, 2, 5, 10, 20, 50]
    print("momentum-vs-average variance region map ('m' = momentum lower):")
    header = "alpha\\t " + " ".join(f"{t:>4d}" for t in ts)
    print(header)
    for a in alphas:
        cells = []
        for t in ts:
            cmp = theory.compare_momentum_vs_average(a, t)
            cells.append(f"{'m' if cmp.momentum_lower else 'avg':>4}")
        print(f"{a:<7g} " + " ".join(cells))


def cmd_verify(args: argparse.Namespace) -> int:
    try:
        reports = _verify_reports(args.trials, args.seed, args.quick)
    except InsufficientTrialsError as exc:
        raise ConfigError(str(exc))
    for rep in reports:
        print(
            json.dumps(
                {
                    "record": "bound_report",
                    "experiment": rep.experiment,
                    "parameters": rep.parameters,
                    "analytic_bound": rep.analytic_bound,
                    "empirical": rep.empirical_value,
                    "trials": rep.trials,
                    "satisfied": rep.satisfied,
                    "rng": rep.rng,
                },
                sort_keys=True,
            )
        )
    print()
    print(theory.render_reports(reports))
    print()
    _print_region_map()
    if args.csv:
        theory.write_reports_csv(reports, args.csv)
        print(f"reports written to {args.csv}")
    return EXIT_OK if all(r.satisfied for r in reports) else 1


def cmd_replay(args: argparse.Namespace) -> int:
    gammas = [g for g in (s.strip() for s in args.gammas.split(",")) if g]
    if not gammas:
        raise ConfigError("gamma sweep list is empty")
    try:
        values = [float(g) for g in gammas]
    except ValueError as exc:
        raise ConfigError(f"bad gamma value: {exc}")
    for g in values:
        if not (0.0 < g <= 1.0):
            raise ConfigError(f"gamma {g} outside (0, 1]")

    header, steps, _ = read_trace(args.trace)
    alpha = args.alpha if args.alpha is not None else header["config"]["alpha"]
    sequences = trace_m_sequences(steps)
    if not sequences:
        raise TraceSchemaError(f"{args.trace}: no step records to replay")

    flagged_by_gamma: dict[float, dict[tuple[str, int], set[int]]] = {}
    for g in values:
        flagged: dict[tuple[str, int], set[int]] = {}
        for key, ms in sequences.items():
            decisions = replay_gating(ms, ScalePolicy.mur(g), alpha)
            flagged[key] = {d.step_index for d in decisions if d.scale}
        flagged_by_gamma[g] = flagged

    monotone = True
    ordered = sorted(values)
    for lo, hi in zip(ordered, ordered[1:]):
        for key in sequences:
            if not flagged_by_gamma[lo][key] <= flagged_by_gamma[hi][key]:
                monotone = False

    print(f"replayed {len(sequences)} trajectories (alpha={alpha})")
    for g in values:
        count = sum(len(v) for v in flagged_by_gamma[g].values())
        print(f"gamma={g:<5g} flagged_steps={count}")
        print(
            json.dumps(
                {"record": "replay", "gamma": g, "flagged_steps": count},
                sort_keys=True,
            )
        )
    print(f"subset monotonicity across adjacent gammas: {'ok' if monotone else 'VIOLATED'}")
    return EXIT_OK if monotone else 1


def cmd_report(args: argparse.Namespace) -> int:
    _, steps, trajectories = read_trace(args.trace)
    if not trajectories:
        raise TraceSchemaError(f"{args.trace}: no trajectory records")
    total = len(trajectories)
    completed = [t for t in trajectories if t.get("failure") is None]
    correct = sum(1 for t in trajectories if t.get("correct"))
    scaled = sum(t.get("scaled_steps", 0) for t in completed)
    n_steps = sum(t.get("steps", 0) for t in completed)
    summary = {
        "record": "trace_report",
        "trajectories": total,
        "failures": total - len(completed),
        "accuracy": correct / total if total else 0.0,
        "avg_backbone_tokens": (
            sum(t["backbone_tokens"] for t in completed) / len(completed)
            if completed
            else 0.0
        ),
        "avg_external_tokens": (
            sum(t["external_tokens"] for t in completed) / len(completed)
            if completed
            else 0.0
        ),
        "total_steps": n_steps,
        "scaled_steps": scaled,
        "scaled_fraction": scaled / n_steps if n_steps else 0.0,
    }
    width = max(len(k) for k in summary)
    for key, value in summary.items():
        if key == "record":
            continue
        shown = f"{value:.4f}" if isinstance(value, float) else value
        print(f"{key:<{width}}  {shown}")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": cmd_run,
        "verify": cmd_verify,
        "replay": cmd_replay,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TraceSchemaError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except MugateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
