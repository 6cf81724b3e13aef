"""Command-line front end.

Subcommands: ingest, elicit, fit, cv, efficiency, report.  Configuration
comes from an optional key=value file plus flags; secrets only ever come
from the environment (LLM_API_KEY, endpoint override via LLM_ENDPOINT).
Everything that writes does so atomically (temp file + rename), and all
randomness flows from the single --seed value.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 network or
elicitation failure, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import io
import csv
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import __version__
from .crossval import (
    CvCondition,
    cv_summary_rows,
    cv_table_rows,
    run_cv_experiment,
)
from .data import DataError, load_dataset, summarize
from .efficiency import (
    DEFAULT_RHO_GRID,
    SplitSpec,
    efficiency_summary_rows,
    efficiency_table_rows,
    run_efficiency_experiment,
)
from .elicitation import (
    API_KEY_ENV_VAR,
    DEFAULT_ENDPOINT,
    ENDPOINT_ENV_VAR,
    AllQueriesFailedError,
    ElicitationConfig,
    ElicitationError,
    ElicitationRecord,
    FixtureTransport,
    HttpTransport,
    PromptStrategy,
    elicit_prior,
    prior_param_stats,
    write_audit_log,
)
from .model import META_ANALYTICAL, HyperPriorSpec
from .sampler import McmcConfig, NumericalError, export_draws, run_mcmc

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NETWORK = 4
EXIT_NUMERICAL = 5


class ConfigError(ValueError):
    pass


_DEFAULT_MODELS = ("llama-3.3-70b-instruct", "medgemma-27b-it")
_DEFAULT_TEMPERATURES = (0.1, 0.5, 1.0)
_DEFAULT_STRATEGIES = ("blind", "disease_informed")


@dataclass
class RunConfig:
    """Everything a command needs; file keys mirror the field names."""

    dataset: str | None = None
    out: str | None = None  # output root; commands fall back to ./out
    seed: int = 0
    n_jobs: int = 1
    # sampler
    n_chains: int = 4
    n_warmup: int = 1000
    n_draws: int = 1000
    target_accept: float = 0.44
    rhat_threshold: float = 1.1
    # elicitation
    endpoint: str = DEFAULT_ENDPOINT
    models: tuple[str, ...] = _DEFAULT_MODELS
    strategies: tuple[str, ...] = _DEFAULT_STRATEGIES
    temperatures: tuple[float, ...] = _DEFAULT_TEMPERATURES
    n_queries: int = 5
    max_retries: int = 5
    backoff_base: float = 1.0
    timeout: float = 60.0
    strict: bool = False
    fixtures: str | None = None
    live: bool = False
    # experiments
    k: int = 5
    rho_grid: tuple[float, ...] = DEFAULT_RHO_GRID
    n_replications: int = 20
    train_fraction: float = 0.7
    queries_per_replication: int = 1

    def mcmc_config(self, **overrides) -> McmcConfig:
        kwargs = dict(n_chains=self.n_chains, n_warmup=self.n_warmup,
                      n_draws=self.n_draws, seed=self.seed,
                      adapt_target_accept=self.target_accept,
                      rhat_threshold=self.rhat_threshold)
        kwargs.update(overrides)
        try:
            return McmcConfig(**kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def elicitation_config(self, model_id: str, temperature: float) -> ElicitationConfig:
        try:
            return ElicitationConfig(
                model_id=model_id,
                endpoint_url=os.environ.get(ENDPOINT_ENV_VAR, self.endpoint),
                temperature=temperature,
                n_queries=self.n_queries,
                max_retries=self.max_retries,
                backoff_base=self.backoff_base,
                timeout=self.timeout,
                api_key=os.environ.get(API_KEY_ENV_VAR),
                strict=self.strict,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


_TUPLE_FIELDS = {"models", "strategies", "temperatures", "rho_grid"}
_BOOL_FIELDS = {"strict", "live"}


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ConfigError(f"config key {key!r}: expected boolean, got {raw!r}")


def load_config(path: str | os.PathLike) -> RunConfig:
    """Parse a line-oriented ``key = value`` file (# starts a comment)."""
    spec_by_name = {f.name: f for f in fields(RunConfig)}
    values: dict[str, object] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in spec_by_name:
            raise ConfigError(f"{path}: line {lineno}: unknown config key {key!r}")
        values[key] = _coerce_config_value(key, raw, spec_by_name[key].type)
    return RunConfig(**values)


def _coerce_config_value(key: str, raw: str, type_hint: str):
    try:
        if key in _BOOL_FIELDS:
            return _parse_bool(raw, key)
        if key in _TUPLE_FIELDS:
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if key in ("temperatures", "rho_grid"):
                return tuple(float(p) for p in parts)
            return tuple(parts)
        if "int" in type_hint:
            return int(raw)
        if "float" in type_hint:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from exc


def _apply_common_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    for attr in ("seed", "out", "fixtures", "n_jobs"):
        val = getattr(args, attr, None)
        if val is not None:
            setattr(cfg, attr, val)
    if getattr(args, "live", False):
        cfg.live = True
    if getattr(args, "dataset", None):
        cfg.dataset = args.dataset
    return cfg


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return _apply_common_flags(cfg, args)


def _make_transport(cfg: RunConfig):
    if cfg.fixtures:
        try:
            return FixtureTransport.from_path(cfg.fixtures)
        except OSError as exc:
            raise ConfigError(f"cannot read fixtures: {exc}") from exc
    if cfg.live:
        endpoint = os.environ.get(ENDPOINT_ENV_VAR, cfg.endpoint)
        api_key = os.environ.get(API_KEY_ENV_VAR)
        if not api_key:
            raise ConfigError(
                f"live mode requires the {API_KEY_ENV_VAR} environment variable")
        if not endpoint:
            raise ConfigError("live mode requires an endpoint URL")
        return HttpTransport(endpoint, api_key=api_key, timeout=cfg.timeout)
    raise ConfigError("either a fixtures path (--fixtures) or --live is required")


def _out_dir(cfg: RunConfig, kind: str) -> Path:
    path = Path(cfg.out or "out") / kind
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _write_csv(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()),
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    _write_atomic(path, buf.getvalue())


def _format_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(row) for row in rows)
    return "\n".join(lines) + "\n"


def _require_dataset(cfg: RunConfig):
    if not cfg.dataset:
        raise ConfigError("a dataset path is required (--dataset or config)")
    return load_dataset(cfg.dataset)


def _parse_strategy(name: str) -> PromptStrategy:
    try:
        return PromptStrategy(name)
    except ValueError as exc:
        valid = ", ".join(s.value for s in PromptStrategy)
        raise ConfigError(f"unknown strategy {name!r} (expected one of: {valid})") from exc


def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    cfg.dataset = args.path
    dataset = _require_dataset(cfg)
    s = summarize(dataset)
    lines = [
        f"{s.n_patients} patients, {s.n_sites} sites",
        f"site size: mean {s.mean_site_size:.2f}, range {s.min_site_size}-{s.max_site_size}",
        f"event counts: range {s.min_count}-{s.max_count}",
    ]
    report = "\n".join(lines) + "\n"
    sys.stdout.write(report)
    if cfg.out is not None:
        _write_atomic(_out_dir(cfg, "reports") / "ingest.txt", report)
    return EXIT_OK


def _pick(flag_value, config_values: tuple, what: str, last: bool = False):
    if flag_value is not None:
        return flag_value
    if not config_values:
        raise ConfigError(f"a {what} is required (flag or config)")
    return config_values[-1] if last else config_values[0]


def cmd_elicit(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    model = _pick(args.model, cfg.models, "model id")
    strategy = _parse_strategy(args.strategy)
    temperature = _pick(args.temperature, cfg.temperatures, "temperature")
    ecfg = cfg.elicitation_config(model, temperature)
    if args.n_queries is not None:
        ecfg = replace(ecfg, n_queries=args.n_queries)
    transport = _make_transport(cfg)
    prior = elicit_prior(strategy, ecfg, transport)
    write_audit_log(prior.records, _out_dir(cfg, "audit") / "elicitations.jsonl")
    n_ok = prior.n_successes
    sys.stdout.write(
        f"model {model}, strategy {strategy.value}, temperature {temperature:g}\n"
        f"queries: {len(prior.records)} ({n_ok} parsed)\n"
        f"alpha_rate = {prior.spec.alpha_rate!r}\n"
        f"beta_rate = {prior.spec.beta_rate!r}\n"
    )
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    dataset = _require_dataset(cfg)
    try:
        spec = HyperPriorSpec(alpha_rate=args.alpha_rate, beta_rate=args.beta_rate)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    freeze = tuple(args.freeze) if args.freeze else None
    mcmc = cfg.mcmc_config(freeze_hyperparams=freeze, no_data=args.no_data)
    draws = run_mcmc(dataset, spec, mcmc)

    draws_path = _out_dir(cfg, "draws") / "draws.csv"
    export_draws(draws, draws_path, include_hyperparams=freeze is None)

    rows = [[name, f"{value:.4f}"] for name, value in sorted(draws.diagnostics.items())]
    report = _format_table(["parameter", "rhat"], rows)
    flagged = draws.rhat_flags()
    if flagged:
        names = ", ".join(sorted(flagged))
        report += f"\nwarning: rhat >= {mcmc.rhat_threshold:g} for: {names}\n"
    _write_atomic(_out_dir(cfg, "reports") / "fit_diagnostics.txt", report)
    sys.stdout.write(report)
    sys.stdout.write(f"\ndraws written to {draws_path}\n")
    return EXIT_OK


def _cv_conditions(cfg: RunConfig, args: argparse.Namespace) -> list[CvCondition]:
    conditions: list[CvCondition] = []
    if not getattr(args, "no_baseline", False):
        conditions.append(CvCondition.meta_analytical())
    models = args.models.split(",") if getattr(args, "models", None) else cfg.models
    strategies = (args.strategies.split(",") if getattr(args, "strategies", None)
                  else cfg.strategies)
    temps = (tuple(float(t) for t in args.temperatures.split(","))
             if getattr(args, "temperatures", None) else cfg.temperatures)
    for model in models:
        for strategy in strategies:
            for temp in temps:
                conditions.append(
                    CvCondition.llm(model.strip(), _parse_strategy(strategy.strip()), temp))
    return conditions


def _audit_cv(results, cfg: RunConfig) -> None:
    records: list[ElicitationRecord] = []
    for res in results:
        for fold in res.per_fold:
            if fold.prior is not None:
                records.extend(fold.prior.records)
    if records:
        write_audit_log(records, _out_dir(cfg, "audit") / "cv_elicitations.jsonl")


def cmd_cv(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    dataset = _require_dataset(cfg)
    conditions = _cv_conditions(cfg, args)
    needs_llm = any(c.is_llm for c in conditions)
    transport = _make_transport(cfg) if needs_llm else None
    # per-condition model/temperature are substituted in during the run;
    # the base config only carries endpoint, retry, and query settings
    base_model = cfg.models[0] if cfg.models else "unused"
    base_temp = cfg.temperatures[0] if cfg.temperatures else 1.0
    ecfg = cfg.elicitation_config(base_model, base_temp)
    k = args.k if args.k is not None else cfg.k

    results = run_cv_experiment(dataset, conditions, cfg.mcmc_config(),
                                ecfg, transport, k=k, seed=cfg.seed,
                                n_jobs=cfg.n_jobs)

    _write_csv(_out_dir(cfg, "results") / "cv_folds.csv", cv_table_rows(results))
    _write_csv(_out_dir(cfg, "results") / "cv_summary.csv", cv_summary_rows(results))
    _audit_cv(results, cfg)

    rows = [[res.condition.identity(),
             f"{res.pooled_mean_lpd:.3f}", f"{res.pooled_sd_lpd:.3f}",
             f"{res.fold_mean_lpd:.3f}", f"{res.fold_sd_lpd:.3f}"]
            for res in results]
    report = _format_table(
        ["condition", "lpd_mean", "lpd_sd", "fold_mean", "fold_sd"], rows)
    _write_atomic(_out_dir(cfg, "reports") / "cv_report.txt", report)
    sys.stdout.write(report)
    return EXIT_OK


def cmd_efficiency(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    dataset = _require_dataset(cfg)

    conditions: list[CvCondition] = []
    grids: dict[str, tuple[float, ...]] = {}
    if not args.no_baseline:
        baseline = CvCondition.meta_analytical()
        conditions.append(baseline)
        # the reference table reports the baseline at full data only
        grids[baseline.identity()] = (1.0,)
    model = _pick(args.model, cfg.models, "model id")
    strategy = _parse_strategy(args.strategy)
    temperature = _pick(args.temperature, cfg.temperatures, "temperature", last=True)
    conditions.append(CvCondition.llm(model, strategy, temperature))

    rho_grid = (tuple(float(r) for r in args.rho_grid.split(","))
                if args.rho_grid else cfg.rho_grid)
    n_reps = args.n_replications if args.n_replications is not None else cfg.n_replications
    needs_llm = any(c.is_llm for c in conditions)
    transport = _make_transport(cfg) if needs_llm else None
    ecfg = cfg.elicitation_config(model, temperature)

    result = run_efficiency_experiment(
        dataset, conditions, cfg.mcmc_config(), ecfg, transport,
        rho_grid=rho_grid, n_replications=n_reps,
        split=SplitSpec(train_fraction=cfg.train_fraction, seed=cfg.seed),
        seed=cfg.seed, n_jobs=cfg.n_jobs, rho_grid_by_condition=grids,
        queries_per_replication=cfg.queries_per_replication,
    )

    _write_csv(_out_dir(cfg, "results") / "efficiency_runs.csv",
               efficiency_table_rows(result))
    _write_csv(_out_dir(cfg, "results") / "efficiency_summary.csv",
               efficiency_summary_rows(result))
    records: list[ElicitationRecord] = []
    for cell in result.cells:
        for run in cell.runs:
            if run.prior is not None:
                records.extend(run.prior.records)
    if records:
        write_audit_log(records, _out_dir(cfg, "audit") / "efficiency_elicitations.jsonl")

    rows = [[cell.condition.identity(), f"{cell.rho:g}",
             f"{cell.lpd_mean:.3f}", f"{cell.lpd_sd:.3f}",
             f"{cell.train_patients_mean:.1f}"]
            for cell in result.cells]
    report = _format_table(
        ["condition", "rho", "lpd_mean", "lpd_sd", "train_patients"], rows)
    report += f"\ntest set: {result.n_test_patients} patients, {len(result.test_site_ids)} sites\n"
    _write_atomic(_out_dir(cfg, "reports") / "efficiency_report.txt", report)
    sys.stdout.write(report)
    return EXIT_OK


def _load_audit_records(directory: Path) -> list[ElicitationRecord]:
    import json

    records: list[ElicitationRecord] = []
    for path in sorted(directory.glob("*.jsonl")):
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                parsed = tuple(obj["parsed"]) if obj.get("parsed") else None
                records.append(ElicitationRecord(
                    strategy=PromptStrategy(obj["strategy"]),
                    temperature=obj["temperature"],
                    model_id=obj["model_id"],
                    prompt_text="",
                    raw_response=obj.get("raw_response"),
                    parsed=parsed,
                    error=obj.get("error"),
                    timestamp=obj.get("timestamp", 0.0),
                ))
    return records


def cmd_report(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    audit_dir = (Path(args.results_dir) if args.results_dir
                 else Path(cfg.out or "out") / "audit")
    if not audit_dir.is_dir():
        raise DataError(f"no such results directory: {audit_dir}")
    records = _load_audit_records(audit_dir)
    if not records:
        raise DataError(f"no elicitation records found under {audit_dir}")

    @dataclass(frozen=True)
    class _Prior:  # prior_param_stats groups by the records inside
        records: tuple[ElicitationRecord, ...]

    stats = prior_param_stats([_Prior(records=tuple(records))])
    rows = []
    csv_rows = []
    for key in sorted(stats):
        model, strategy, temp = key
        for param in ("alpha_rate", "beta_rate"):
            st = stats[key][param]
            rows.append([model, strategy, f"{temp:g}", param, str(st.n),
                         f"{st.mean:.3f}", f"{st.sd:.3f}", f"{st.minimum:.3f}",
                         f"{st.q1:.3f}", f"{st.median:.3f}", f"{st.q3:.3f}",
                         f"{st.maximum:.3f}"])
            csv_rows.append({
                "model": model, "strategy": strategy, "temperature": f"{temp:g}",
                "parameter": param, "n": st.n, "mean": repr(st.mean),
                "sd": repr(st.sd), "min": repr(st.minimum), "q1": repr(st.q1),
                "median": repr(st.median), "q3": repr(st.q3), "max": repr(st.maximum),
            })
    report = _format_table(
        ["model", "strategy", "T", "parameter", "n", "mean", "sd",
         "min", "q1", "median", "q3", "max"], rows)
    _write_atomic(_out_dir(cfg, "reports") / "prior_param_stats.txt", report)
    _write_csv(_out_dir(cfg, "results") / "prior_param_stats.csv", csv_rows)
    sys.stdout.write(report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aebayes",
        description="Hierarchical Bayesian adverse-event modeling with "
                    "LLM-elicited hyperpriors.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, dataset: bool = False):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, default=None, help="global seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--fixtures", default=None,
                       help="JSONL fixture file of recorded responses")
        p.add_argument("--live", action="store_true",
                       help="query the live endpoint (requires LLM_API_KEY)")
        p.add_argument("--n-jobs", dest="n_jobs", type=int, default=None,
                       help="process-level parallelism for experiment cells")
        if dataset:
            p.add_argument("--dataset", default=None, help="patient-level CSV file")

    p = sub.add_parser("ingest", help="validate a dataset and print its summary")
    common(p)
    p.add_argument("path", help="patient-level CSV file")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("elicit", help="run one elicitation batch")
    common(p)
    p.add_argument("--model", default=None)
    p.add_argument("--strategy", default="blind",
                   choices=[s.value for s in PromptStrategy])
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--n-queries", dest="n_queries", type=int, default=None)
    p.set_defaults(func=cmd_elicit)

    p = sub.add_parser("fit", help="fit the model once and dump draws")
    common(p, dataset=True)
    p.add_argument("--alpha-rate", type=float, default=META_ANALYTICAL.alpha_rate)
    p.add_argument("--beta-rate", type=float, default=META_ANALYTICAL.beta_rate)
    p.add_argument("--freeze", nargs=2, type=float, metavar=("ALPHA", "BETA"),
                   default=None, help="hold (alpha, beta) fixed; sample rates only")
    p.add_argument("--no-data", action="store_true",
                   help="suppress the likelihood and sample the prior")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("cv", help="stratified k-fold cross-validation experiment")
    common(p, dataset=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--models", default=None, help="comma-separated model ids")
    p.add_argument("--strategies", default=None, help="comma-separated strategies")
    p.add_argument("--temperatures", default=None, help="comma-separated temperatures")
    p.add_argument("--no-baseline", action="store_true",
                   help="skip the meta-analytical baseline condition")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("efficiency", help="train-fraction subsampling experiment")
    common(p, dataset=True)
    p.add_argument("--model", default=None)
    p.add_argument("--strategy", default="blind",
                   choices=[s.value for s in PromptStrategy])
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--rho-grid", dest="rho_grid", default=None,
                   help="comma-separated subsampling fractions")
    p.add_argument("--n-replications", dest="n_replications", type=int, default=None)
    p.add_argument("--no-baseline", action="store_true")
    p.set_defaults(func=cmd_efficiency)

    p = sub.add_parser("report", help="prior-parameter statistics from audit logs")
    common(p)
    p.add_argument("--results-dir", default=None,
                   help="directory of audit JSONL files (default: <out>/audit)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (AllQueriesFailedError, ElicitationError) as exc:
        print(f"elicitation error: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
