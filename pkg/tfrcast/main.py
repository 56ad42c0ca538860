"""Command-line entry point: ``tfrcast <command> [options]``."""

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from typing import Optional, Sequence, Tuple

from . import SCHEMA_VERSION, __version__
from .cache_manager import WindowCacheManager
from .ensemble import EnsembleMemberError, load_ensemble, train_ensemble
from .evaluation import run_backtest
from .harmonizer import HarmonizedPanel, harmonize
from .manifest import RunManifest, hash_file, write_csv
from .model import CheckpointError
from .nn.rng import RngStream
from .projection import (
    ComparatorSchemaError,
    build_aggregate_report,
    forecast_forward,
    group_by_model,
    load_comparators,
    load_regions,
    load_weights,
    read_forecasts,
    regional_endpoint_table,
    write_forecasts,
    write_regions,
    write_weights,
)
from .report_parser import ReportParseError, RawReportParser, write_reports
from .settings_manager import ConfigError, SettingsManager
from .synth import SynthConfig, country_codes, synth_panel, synth_regions, synth_weights
from .trainer import (
    TrainConfig,
    TrainingDivergedError,
    gradcheck_tiny,
    random_search,
    validation_objective,
)
from .transform import (
    augment_low_fertility,
    country_index_for,
    fit_scaler,
    log_standardize,
    temporal_split,
)

logger = logging.getLogger(__name__)

EXIT_CODES = {"internal": 1, "usage": 2, "input": 3, "config": 4, "data": 5, "numeric": 6}
TRANSFORM_KEYS = (
    "seed",
    "train_cutoff",
    "validation_years",
    "l_enc",
    "l_pred",
    "augment_threshold",
    "augment_windows",
    "noise_sigma",
)


class UsageError(Exception):
    """Bad command line."""


class NumericError(Exception):
    """A numerical check failed."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def error_category(exc: BaseException) -> str:
    """Map an exception to its CLI error category."""
    if isinstance(exc, EnsembleMemberError) and exc.__cause__ is not None:
        return error_category(exc.__cause__)
    if isinstance(exc, UsageError):
        return "usage"
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(
        exc,
        (FileNotFoundError, ConnectionError, ReportParseError, ComparatorSchemaError, CheckpointError),
    ):
        return "input"
    if isinstance(exc, (TrainingDivergedError, FloatingPointError, NumericError)):
        return "numeric"
    if isinstance(exc, (ValueError, KeyError)):
        return "data"
    return "internal"


def _combine_hashes(*parts: str) -> str:
    return hashlib.sha256("/".join(parts).encode("utf-8")).hexdigest()


def _panel_paths(arg: str) -> Tuple[str, Optional[str]]:
    """A panel directory (panel.csv + diagnostics.csv) or a panel CSV path."""
    if os.path.isdir(arg):
        panel_path = os.path.join(arg, "panel.csv")
        diag_path = os.path.join(arg, "diagnostics.csv")
    else:
        panel_path = arg
        diag_path = os.path.join(os.path.dirname(arg), "diagnostics.csv")
    if not os.path.exists(panel_path):
        raise FileNotFoundError(f"Panel not found: {panel_path}")
    return panel_path, diag_path if os.path.exists(diag_path) else None


def _load_panel(arg: str) -> HarmonizedPanel:
    return HarmonizedPanel.read(*_panel_paths(arg))


def _settings(args) -> SettingsManager:
    """Config file (if any) with command-line overrides applied."""
    settings = SettingsManager(args.config) if args.config else SettingsManager()
    overrides = {
        "seed": getattr(args, "seed", None),
        "members": getattr(args, "members", None),
        "end_year": getattr(args, "end_year", None),
        "jobs": getattr(args, "jobs", None),
    }
    for key, value in overrides.items():
        if value is not None:
            settings.set_setting(key, value)
    if getattr(args, "no_smooth", False):
        settings.set_setting("smoothing", False)
    return settings


def _finish(manifest: RunManifest, out_dir: str, settings: Optional[SettingsManager] = None):
    if settings is not None:
        config_path = os.path.join(out_dir, "config.txt")
        settings.save_settings(config_path)
        manifest.add_output("config", config_path)
    manifest.write(out_dir)


def cmd_ingest(args) -> int:
    settings = _settings(args)
    parser = RawReportParser()
    reports = parser.parse_file(args.raw)
    data_hash = hashlib.sha256("\n".join(r.to_row() for r in reports).encode("utf-8")).hexdigest()
    manifest = RunManifest("ingest", settings.config_hash(), data_hash, settings.get_setting("seed"))

    panel = harmonize(
        reports,
        smoothing=settings.get_setting("smoothing"),
        modeled_sources=settings.get_setting("modeled_sources"),
    )
    if len(panel) == 0:
        raise ValueError("No country survived harmonization")
    panel_path = os.path.join(args.out, "panel.csv")
    diag_path = os.path.join(args.out, "diagnostics.csv")
    panel.write(panel_path, diag_path, manifest.manifest_id)
    manifest.add_output("panel", panel_path)
    manifest.add_output("diagnostics", diag_path)
    _finish(manifest, args.out, settings)

    meta = panel.metadata
    print(
        f"{meta['n_countries']} countries, {meta['n_cells']} cells, "
        f"{meta['n_interpolated']} interpolated, {meta['n_flagged']} flagged, "
        f"{meta['n_smoothed']} smoothed, {parser.duplicates_dropped} duplicate rows dropped"
    )
    return 0


def _transform_hash(settings: SettingsManager, cutoff: Optional[int]) -> str:
    values = {k: settings.get_setting(k) for k in TRANSFORM_KEYS}
    values["train_cutoff"] = cutoff
    return hashlib.sha256(json.dumps(values, sort_keys=True).encode("utf-8")).hexdigest()


def cmd_train(args) -> int:
    settings = _settings(args)
    panel = _load_panel(args.panel)
    seed = settings.get_setting("seed")
    cutoff = None if args.full else settings.get_setting("train_cutoff")
    panel_hash = panel.content_hash()
    manifest = RunManifest("train", settings.config_hash(), panel_hash, seed)

    codes = panel.country_codes
    index = country_index_for(codes)
    l_enc, l_pred = settings.get_setting("l_enc"), settings.get_setting("l_pred")

    cache = WindowCacheManager(settings.get_setting("cache_dir"))
    transform_hash = _transform_hash(settings, cutoff)
    cached = None if args.no_cache else cache.load_split(panel_hash, transform_hash)
    if cached is not None:
        split, scaler = cached
        logger.info("Using cached windows")
    else:
        scaler = fit_scaler(panel, cutoff)
        zpanel = log_standardize(panel, scaler)
        split = temporal_split(
            zpanel, index, l_enc, l_pred, cutoff, settings.get_setting("validation_years")
        )
        augmented = augment_low_fertility(
            split.train,
            panel,
            index,
            RngStream(seed).split("augment"),
            cutoff_year=cutoff,
            threshold=settings.get_setting("augment_threshold"),
            n_recent=settings.get_setting("augment_windows"),
            noise_sigma=settings.get_setting("noise_sigma"),
        )
        split = replace(split, train=augmented)
        cache.save_split(panel_hash, transform_hash, split, scaler)
    if len(split.train) == 0:
        raise ValueError(
            f"No training windows: series must span at least l_enc + 6 + l_pred = "
            f"{l_enc + 6 + l_pred} years before the cutoff"
        )

    base = TrainConfig.from_settings(settings.get_all_settings())
    budget = settings.get_setting("search_budget")
    if budget > 0:
        result = random_search(
            base, validation_objective(split.train, split.validation, len(codes)), budget, seed
        )
        base = replace(result.best, seed=seed)
        logger.info("Search picked trial %d", result.best_index)

    spec = train_ensemble(
        base,
        split.train,
        split.validation,
        scaler,
        codes,
        args.out,
        n_members=settings.get_setting("members"),
        jobs=settings.get_setting("jobs"),
        manifest_id=manifest.manifest_id,
        progress_callback=lambda done, total: logger.info("Trained %d/%d members", done, total),
    )
    manifest.add_output("ensemble", os.path.join(args.out, "ensemble.json"))
    for member in spec.members:
        manifest.add_output(f"member_{member.index:02d}", os.path.join(args.out, member.checkpoint))
    _finish(manifest, args.out, settings)
    print(
        f"{len(spec)} members, {len(split.train)} train / {len(split.validation)} validation windows, "
        f"best validation losses: "
        + ", ".join(f"{m.best_val_loss:.4f}" for m in spec.members)
    )
    return 0


def cmd_evaluate(args) -> int:
    settings = _settings(args)
    ensemble = load_ensemble(args.model)
    panel = _load_panel(args.panel)
    comparators = load_comparators(args.comparators) if args.comparators else {}
    data_hash = _combine_hashes(panel.content_hash(), hash_file(os.path.join(args.model, "ensemble.json")))
    manifest = RunManifest("evaluate", settings.config_hash(), data_hash, settings.get_setting("seed"))

    result = run_backtest(ensemble, panel, settings.get_setting("train_cutoff"), comparators)
    for name, path in result.write(args.out, manifest.manifest_id).items():
        manifest.add_output(name, path)
    _finish(manifest, args.out, settings)

    for metric in ("rmse", "crps", "coverage90"):
        best = result.report.best(metric)
        print(f"{metric}: best {best.model} (median {best.median:.4f}, p={best.p_value:.4g})")
    return 0


def cmd_forecast(args) -> int:
    settings = _settings(args)
    ensemble = load_ensemble(args.model)
    panel = _load_panel(args.panel)
    end_year = settings.get_setting("end_year")
    data_hash = _combine_hashes(panel.content_hash(), hash_file(os.path.join(args.model, "ensemble.json")))
    manifest = RunManifest("forecast", settings.config_hash(), data_hash, settings.get_setting("seed"))

    records = forecast_forward(ensemble, panel, end_year)
    path = os.path.join(args.out, "forecasts.csv")
    write_forecasts(records, path, manifest.manifest_id)
    manifest.add_output("forecasts", path)
    _finish(manifest, args.out, settings)
    print(f"{len({r.country_code for r in records})} countries projected to {end_year}")
    return 0


def cmd_report(args) -> int:
    settings = _settings(args)
    end_year = settings.get_setting("end_year")
    records = read_forecasts(args.forecasts)
    by_model = group_by_model(records)
    if args.comparators:
        for model, comp in load_comparators(args.comparators).items():
            by_model.setdefault(model, []).extend(comp)

    inputs = [args.forecasts] + [p for p in (args.weights, args.regions) if p]
    data_hash = _combine_hashes(*(hash_file(p) for p in inputs))
    manifest = RunManifest("report", settings.config_hash(), data_hash, settings.get_setting("seed"))

    weights = load_weights(args.weights) if args.weights else None
    report = build_aggregate_report(by_model, weights, end_year)
    csv_path = os.path.join(args.out, "aggregate.csv")
    json_path = os.path.join(args.out, "aggregate.json")
    report.write(csv_path, json_path, manifest.manifest_id)
    manifest.add_output("aggregate", csv_path)
    manifest.add_output("aggregate_json", json_path)

    if args.regions:
        table = regional_endpoint_table(by_model, load_regions(args.regions), end_year)
        regional_path = os.path.join(args.out, "regional.csv")
        write_csv(table, regional_path, manifest.manifest_id)
        manifest.add_output("regional", regional_path)
    _finish(manifest, args.out, settings)

    for model in sorted(report.shares):
        print(f"{model}: share below 1.5 in {end_year} = {report.share_below(model):.3f}")
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck_tiny(seed=args.seed or 0, n_coords=args.coords)
    print(report.summary())
    if not report.passed:
        raise NumericError(f"gradient check failed on {len(report.failures)} coordinates")
    return 0


def cmd_synth(args) -> int:
    settings = _settings(args)
    seed = settings.get_setting("seed")
    config = SynthConfig(
        n_countries=args.countries,
        n_years=args.years,
        noise_sigma=args.noise,
        gap_prob=args.gap_prob,
        duplicate_prob=args.dup_prob,
        modeled_prob=args.modeled_prob,
        repeat_prob=args.repeat_prob,
    )
    reports, _ = synth_panel(config, seed)
    data_hash = hashlib.sha256(json.dumps(asdict(config), sort_keys=True).encode("utf-8")).hexdigest()
    manifest = RunManifest("synth", settings.config_hash(), data_hash, seed)

    reports_path = os.path.join(args.out, "reports.csv")
    write_reports(reports, reports_path, manifest.manifest_id)
    manifest.add_output("reports", reports_path)

    codes = country_codes(config.n_countries)
    weights_path = os.path.join(args.out, "weights.csv")
    regions_path = os.path.join(args.out, "regions.csv")
    write_weights(synth_weights(codes, seed), weights_path, manifest.manifest_id)
    write_regions(synth_regions(codes), regions_path, manifest.manifest_id)
    manifest.add_output("weights", weights_path)
    manifest.add_output("regions", regions_path)
    _finish(manifest, args.out)
    print(f"{len(reports)} reports for {config.n_countries} countries written to {reports_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tfrcast", description="Global probabilistic TFR forecasting")
    parser.add_argument(
        "--version",
        action="version",
        version=f"tfrcast {__version__} (schema {SCHEMA_VERSION})",
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging verbosity (stderr)",
    )
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, help_text, func, out=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="Config file (.json or key=value)")
        p.add_argument("--seed", type=int, help="Global seed")
        if out:
            p.add_argument("--out", required=True, help="Output directory")
        p.set_defaults(func=func)
        return p

    p = command("ingest", "Harmonize raw reports into a panel", cmd_ingest)
    p.add_argument("--raw", required=True, help="Raw reports file or URL")
    p.add_argument("--no-smooth", action="store_true", help="Skip smoothing of flagged series")

    p = command("train", "Train the ensemble", cmd_train)
    p.add_argument("--panel", required=True, help="Panel directory or panel.csv")
    p.add_argument("--members", type=int, help="Number of ensemble members")
    p.add_argument("--jobs", type=int, help="Parallel member processes")
    p.add_argument("--full", action="store_true", help="Fit on the full sample (no held-out years)")
    p.add_argument("--no-cache", action="store_true", help="Rebuild windows even if cached")

    p = command("evaluate", "Backtest on the held-out years", cmd_evaluate)
    p.add_argument("--model", required=True, help="Ensemble directory")
    p.add_argument("--panel", required=True, help="Panel directory or panel.csv")
    p.add_argument("--comparators", nargs="*", default=[], help="Held-out comparator forecast files")

    p = command("forecast", "Project forward from the last observed year", cmd_forecast)
    p.add_argument("--model", required=True, help="Ensemble directory (full-sample fit)")
    p.add_argument("--panel", required=True, help="Panel directory or panel.csv")
    p.add_argument("--end-year", type=int, help="Last projected year")

    p = command("report", "Aggregate projections against comparators", cmd_report)
    p.add_argument("--forecasts", required=True, help="forecasts.csv from the forecast command")
    p.add_argument("--comparators", nargs="*", default=[], help="Comparator forecast files")
    p.add_argument("--weights", help="Population weights file")
    p.add_argument("--regions", help="Region map file")
    p.add_argument("--end-year", type=int, help="Endpoint year")

    p = command("gradcheck", "Verify analytic gradients on a tiny model", cmd_gradcheck, out=False)
    p.add_argument("--coords", type=int, default=200, help="Coordinates to sample")

    p = command("synth", "Generate a synthetic raw reports panel", cmd_synth)
    p.add_argument("--countries", type=int, default=20)
    p.add_argument("--years", type=int, default=80)
    p.add_argument("--noise", type=float, default=0.05, help="Observation noise SD")
    p.add_argument("--gap-prob", type=float, default=0.05)
    p.add_argument("--dup-prob", type=float, default=0.10)
    p.add_argument("--modeled-prob", type=float, default=0.0)
    p.add_argument(
        "--repeat-prob", type=float, default=0.01, help="Share of rows written twice verbatim"
    )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a command is required")
    except UsageError as e:
        print(f"error[usage]: {e}", file=sys.stderr)
        return EXIT_CODES["usage"]

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except Exception as e:
        category = error_category(e)
        if category == "internal":
            logger.debug("Unhandled error", exc_info=True)
        message = " ".join(str(e).split())
        print(f"error[{category}]: {message}", file=sys.stderr)
        return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
