import argparse
import os
import sys
from typing import List, Optional, Union

from .censtrun import RecordSet
from .config import ConfigManager, RunConfig
from .diagnostics import HyperGrid, diagnose, fit_dataset, param_names
from .errors import ConfigError, ConvergenceError, DatasetError, DomainError, SingularMatrixError, SwleError
from .families import get_family, make_link
from .logger import get_logger
from .output import OutputFormatter, parameter_rows
from .parsers import DatasetParser
from .progress import ProgressIndicator
from .simlab import SimDesign, calibrate_grid, preset, run_study
from .swle import FitResult, GlmData
from .weighting import WeightSpec

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVALID = 2
EXIT_NOT_CONVERGED = 3
EXIT_SINGULAR = 4
EXIT_INTERRUPTED = 130

EPILOG = """
Examples:
  python main.py fit --data claims.csv --family gamma --link log             # MLE plus calibrated SWLE fits
  python main.py diagnose --data claims.csv --delta 1 0.1 0.001 --k0 1        # Meta/individual Wald tables
  python main.py calibrate --data claims.csv --alpha 0.99 --delta 0.1 0.001   # Weight hyperparameters only
  python main.py simulate --study sim3-case2 -B 200 --jobs 8                   # Replication study
  python main.py simulate --config study.yaml --deterministic --verbose       # Study from a config file
"""


def _add_common(sub: argparse.ArgumentParser):
    sub.add_argument("--config", "-c", type=str, help="Path to config file")
    sub.add_argument("--family", choices=["gamma", "normal", "invgauss"], help="Response family")
    sub.add_argument("--link", choices=["canonical", "log"], help="Link function")
    sub.add_argument("--grid", type=str, help="YAML/JSON file with an explicit list of weight specs")
    sub.add_argument("--alpha", type=float, help="Tail quantile level used for calibration (default: 0.99)")
    sub.add_argument("--delta", type=float, nargs="+", help="Tail-weight ratios to calibrate, one per spec")
    sub.add_argument("--seed", type=int, help="Master random seed")
    sub.add_argument("--out-dir", "-o", type=str, help="Directory for reports (default: results)")
    sub.add_argument("--no-color", action="store_true", help="Disable colored output")
    sub.add_argument("--verbose", "-v", action="store_true", help="Enable verbose logging")
    sub.add_argument("--log", type=str, help="Log file path")
    sub.add_argument("--quiet", "-q", action="store_true", help="Suppress progress output and summaries")


def _add_data(sub: argparse.ArgumentParser):
    sub.add_argument("--data", "-d", type=str, required=True, help="Dataset CSV")
    sub.add_argument("--log-response", action="store_true", default=None,
                     help="Log-transform responses and truncation/censoring bounds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swle",
        description="Score-based weighted likelihood estimation and misspecification diagnostics for GLMs",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EPILOG,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    fit = subparsers.add_parser("fit", help="Fit every weight spec of the grid")
    _add_common(fit)
    _add_data(fit)

    diag = subparsers.add_parser("diagnose", help="Fit the grid and compute Wald diagnostics")
    _add_common(diag)
    _add_data(diag)
    diag.add_argument("--k0", type=int, help="1-based benchmark spec for residuals (default: 1)")
    diag.add_argument("--level", type=float, help="Test level (default: 0.05)")
    diag.add_argument("--jobs", "-j", type=int, help="Concurrent fits")

    cal = subparsers.add_parser("calibrate", help="Calibrate weight hyperparameters")
    _add_common(cal)
    source = cal.add_mutually_exclusive_group(required=True)
    source.add_argument("--data", "-d", type=str, help="Dataset CSV (calibrated at its MLE)")
    source.add_argument("--study", type=str, help="Study preset (calibrated against the known model)")
    cal.add_argument("--log-response", action="store_true", default=None,
                     help="Log-transform responses and truncation/censoring bounds")

    sim = subparsers.add_parser("simulate", help="Run a replication study")
    _add_common(sim)
    sim.add_argument("--study", type=str, help="Study preset, e.g. sim1-gamma, sim2, sim3-case1")
    sim.add_argument("--n", type=int, help="Sample size override for the preset")
    sim.add_argument("--fit-family", choices=["gamma", "normal", "invgauss"],
                     help="Fit a different family than the generating one")
    sim.add_argument("--replications", "-B", type=int, help="Number of replications")
    sim.add_argument("--level", type=float, help="Test level (default: 0.05)")
    sim.add_argument("--jobs", "-j", type=int, help="Parallel replications")
    sim.add_argument("--deterministic", action="store_true", default=None,
                     help="Run replications sequentially in index order")
    return parser


def _load_run_config(args) -> RunConfig:
    manager = ConfigManager(args.config)
    manager.override("model", "family", args.family)
    manager.override("model", "link", args.link)
    manager.override("grid", "alpha", args.alpha)
    manager.override("grid", "deltas", args.delta)
    manager.override("run", "seed", args.seed)
    manager.override("run", "out_dir", args.out_dir)
    manager.override("data", "log_response", getattr(args, "log_response", None))
    manager.override("diagnostics", "k0", getattr(args, "k0", None))
    manager.override("diagnostics", "level", getattr(args, "level", None))
    manager.override("run", "jobs", getattr(args, "jobs", None))
    manager.override("run", "deterministic", getattr(args, "deterministic", None))
    manager.override("study", "B", getattr(args, "replications", None))
    if getattr(args, "study", None):
        manager.override("study", "preset", args.study)
        manager.get_config()["study"]["design"] = None
    manager.override("study", "n", getattr(args, "n", None))
    manager.override("study", "fit_family", getattr(args, "fit_family", None))
    if args.grid:
        if args.delta:
            raise ConfigError("--grid and --delta are mutually exclusive")
        manager.override("grid", "specs", _grid_file_specs(args.grid))
    return RunConfig.from_config(manager.get_config())


def _grid_file_specs(path: str) -> List[dict]:
    if not os.path.exists(path):
        raise ConfigError(f"grid file not found: {path}")
    specs = ConfigManager()._load_yaml_config(path).get("specs")
    if not specs:
        raise ConfigError(f"grid file {path} has no 'specs' list")
    return specs


class CommandRunner:
    """Executes one subcommand against a resolved RunConfig"""

    def __init__(self, args, config: RunConfig, logger):
        self.args = args
        self.config = config
        self.logger = logger
        self.family = get_family(config.family)
        self.link = make_link(self.family, config.link)
        self.formatter = OutputFormatter(enable_colors=not args.no_color)
        self.config_hash = config.config_hash()
        self.mle_plugin = None
        self.mle_fit: Optional[FitResult] = None

    # -- helpers -------------------------------------------------------------
    def _load_data(self, path: str) -> Union[GlmData, RecordSet]:
        records = DatasetParser(self.family, self.config.log_response).parse(path)
        if records.is_complete(self.family):
            return records.complete_data()
        self.logger.info(f"{len(records.censored)} censored records; using the censored/truncated estimator")
        return records

    def _grid(self, data: Union[GlmData, RecordSet]) -> HyperGrid:
        explicit = self.config.explicit_specs()
        if explicit:
            return HyperGrid(tuple(explicit))
        records = data if isinstance(data, RecordSet) else RecordSet.from_complete(data, self.family)
        mle = fit_dataset(self.family, self.link, WeightSpec.mle(), data, self.config.fit_options())
        self.logger.info(f"Calibrating {len(self.config.deltas)} specs at the MLE {mle.params.to_dict()}")
        self.mle_plugin = mle.params
        self.mle_fit = mle
        return HyperGrid.calibrated_censored(self.family, self.link, mle.params, records, self.config.alpha,
                                             self.config.deltas)

    def _path(self, name: str) -> str:
        return os.path.join(self.config.out_dir, name)

    def _save(self, command: str, payload, json_name: str, rows=None, csv_name: Optional[str] = None):
        report = self.formatter.generate_report(command, payload, self.config_hash, self.config.seed)
        self.formatter.save_report(report, self._path(json_name))
        self.logger.success(f"Report saved to: {self._path(json_name)}")
        if rows is not None and csv_name:
            self.formatter.save_report({"provenance": report["provenance"], "rows": rows}, self._path(csv_name))
            self.logger.success(f"Table saved to: {self._path(csv_name)}")
        if not self.args.quiet:
            self.formatter.print_summary(report)
        return report

    # -- subcommands ---------------------------------------------------------
    def fit(self) -> int:
        data = self._load_data(self.args.data)
        grid = self._grid(data)
        options = self.config.fit_options()
        fits = [self.mle_fit if spec.is_mle and self.mle_fit is not None
                else fit_dataset(self.family, self.link, spec, data, options) for spec in grid.specs]
        payload = {"family": self.config.family, "link": self.config.link, "fits": [f.to_dict() for f in fits]}
        names = param_names(fits[0].params.n_coef)
        self._save("fit", payload, "fit.json", parameter_rows(payload["fits"], names), "fit_parameters.csv")
        return EXIT_OK

    def diagnose(self) -> int:
        data = self._load_data(self.args.data)
        grid = self._grid(data)
        report = diagnose(self.family, self.link, grid, data, self.config.fit_options(), k0=self.config.k0 - 1,
                          level=self.config.level, jobs=self.config.jobs, contrast=self.config.contrast)
        payload = report.to_dict()
        self._save("diagnose", payload, "diagnose.json", parameter_rows(payload["fits"], report.names),
                   "diagnose_parameters.csv")
        self.formatter.save_text(report.to_text(), self._path("diagnose.txt"))
        if not self.args.quiet:
            print()
            print(report.to_text())
        return EXIT_OK

    def calibrate(self) -> int:
        if self.args.data:
            data = self._load_data(self.args.data)
            grid = self._grid(data)
            payload = {"source": self.args.data,
                       "mle": None if self.mle_plugin is None else self.mle_plugin.to_dict()}
        else:
            design = preset(self.args.study, seed=self.config.seed)
            grid = calibrate_grid(design, self.config.deltas, self.config.alpha)
            payload = {"source": design.name, "model": design.true_params.to_dict()}
        payload.update({"alpha": self.config.alpha, "deltas": self.config.deltas, "specs": grid.to_list()})
        self._save("calibrate", payload, "calibrate.json")
        return EXIT_OK

    def _design(self) -> SimDesign:
        study = self.config.study
        if not study:
            raise ConfigError("simulate needs --study or a 'study' block in the config file")
        if study.get("design"):
            design = dict(study["design"])
            design["seed"] = self.config.seed
            return SimDesign.from_dict(design)
        overrides = {"seed": self.config.seed}
        if study.get("n"):
            overrides["n"] = int(study["n"])
        if study.get("fit_family"):
            if not str(study["preset"]).startswith("sim1-"):
                raise ConfigError("--fit-family is only available for the sim1 presets")
            overrides["fit_family"] = study["fit_family"]
        return preset(str(study["preset"]), **overrides)

    def simulate(self) -> int:
        design = self._design()
        B = int(self.config.study.get("B") or 100)
        explicit = self.config.explicit_specs()
        grid = HyperGrid(tuple(explicit)) if explicit else None
        progress = ProgressIndicator(total=B, description=f"Simulating {design.name}")
        summary = run_study(design, grid, B=B, level=self.config.level, deltas=self.config.deltas,
                            alpha=self.config.alpha, jobs=self.config.jobs,
                            deterministic=self.config.deterministic, options=self.config.fit_options(),
                            k0=self.config.k0 - 1, contrast=self.config.contrast,
                            progress=None if self.args.quiet else progress.report)
        if not self.args.quiet:
            progress.finish("Study completed")
        self._save("simulate", summary.to_dict(), "simulate.json", summary.to_rows(), "simulate.csv")
        return EXIT_OK


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    log_level = "DEBUG" if args.verbose else "INFO"
    logger = get_logger(level=log_level, log_file=args.log, enable_colors=not args.no_color)

    try:
        config = _load_run_config(args)
        runner = CommandRunner(args, config, logger)
        logger.info(f"Running '{args.command}' with {config.family}/{config.link} (seed {config.seed})")
        return getattr(runner, args.command)()
    except KeyboardInterrupt:
        logger.warning("Interrupted by user")
        return EXIT_INTERRUPTED
    except (DatasetError, ConfigError, DomainError) as e:
        logger.error(f"Invalid input: {e}")
        return EXIT_INVALID
    except ConvergenceError as e:
        logger.error(f"Fit did not converge: {e}")
        if args.verbose and e.trace:
            logger.debug(f"Last iterations: {e.trace[-5:]}")
        return EXIT_NOT_CONVERGED
    except SingularMatrixError as e:
        logger.error(f"Singular covariance ({e.label or 'matrix'}): {e}")
        return EXIT_SINGULAR
    except SwleError as e:
        logger.error(f"{type(e).__name__}: {e}")
        if args.verbose:
            logger.exception("Error details:")
        return EXIT_ERROR
    except Exception as e:
        logger.error(f"Unexpected error: {e}")
        if args.verbose:
            logger.exception("Error details:")
        return EXIT_ERROR


def main():
    sys.exit(run())
