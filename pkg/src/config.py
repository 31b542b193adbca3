import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import yaml

from .errors import CalibrationError, ConfigError
from .swle import COVARIANCE_ESTIMATORS, FitOptions
from .weighting import WeightSpec

CONTRASTS = ("consecutive", "baseline")


class ConfigManager:
    def __init__(self, config_path=None):
        self.config = self._load_default_config()
        if config_path:
            if not os.path.exists(config_path):
                raise ConfigError(f"config file not found: {config_path}")
            self.config = self._merge_configs(self.config, self._load_yaml_config(config_path))

    def _load_default_config(self):
        """Load default configuration"""
        return {
            "model": {
                "family": "gamma",
                "link": "log",
            },
            "grid": {
                "alpha": 0.99,
                "deltas": [1.0, 0.001],
                "specs": [],
            },
            "diagnostics": {
                "k0": 1,
                "level": 0.05,
                "contrast": "consecutive",
            },
            "fitting": {
                "tol": 1e-8,
                "param_tol": 1e-6,
                "max_iter": 500,
                "covariance_estimator": "model",
            },
            "data": {
                "log_response": False,
            },
            "run": {
                "seed": 0,
                "out_dir": "results",
                "jobs": 1,
                "deterministic": False,
            },
            "study": {
                "preset": None,
                "design": None,
                "B": 100,
            },
        }

    def _load_yaml_config(self, config_path):
        """Load configuration from YAML file"""
        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                yaml_config = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"Error loading config file {config_path}: {e}")
        if yaml_config is None:
            return {}
        if not isinstance(yaml_config, dict):
            raise ConfigError(f"config file {config_path} must contain a mapping at the top level")
        return yaml_config

    def _merge_configs(self, default_config, yaml_config):
        """Merge default config with YAML config"""
        merged = copy.deepcopy(default_config)

        for key, value in yaml_config.items():
            if isinstance(value, dict) and key in merged and isinstance(merged[key], dict):
                merged[key] = self._merge_configs(merged[key], value)
            else:
                merged[key] = value

        return merged

    def override(self, section: str, key: str, value):
        """Apply a command-line value; None leaves the merged value in place"""
        if value is not None:
            self.config.setdefault(section, {})[key] = value

    def get_config(self):
        """Get the current configuration"""
        return self.config


@dataclass(frozen=True)
class RunConfig:
    family: str = "gamma"
    link: str = "log"
    alpha: float = 0.99
    deltas: List[float] = field(default_factory=lambda: [1.0, 0.001])
    specs: List[Dict[str, Any]] = field(default_factory=list)
    k0: int = 1
    level: float = 0.05
    contrast: str = "consecutive"
    tol: float = 1e-8
    param_tol: float = 1e-6
    max_iter: int = 500
    covariance_estimator: str = "model"
    log_response: bool = False
    seed: int = 0
    out_dir: str = "results"
    jobs: int = 1
    deterministic: bool = False
    study: Optional[Dict[str, Any]] = None

    @classmethod
    def from_config(cls, config: Dict[str, Any]) -> "RunConfig":
        def section(name):
            value = config.get(name) or {}
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{name}' must be a mapping")
            return value

        model, grid, diag = section("model"), section("grid"), section("diagnostics")
        fitting, data, run, study = section("fitting"), section("data"), section("run"), section("study")
        try:
            out = cls(
                family=str(model.get("family", "gamma")),
                link=str(model.get("link", "log")),
                alpha=float(grid.get("alpha", 0.99)),
                deltas=[float(d) for d in grid.get("deltas") or []],
                specs=list(grid.get("specs") or []),
                k0=int(diag.get("k0", 1)),
                level=float(diag.get("level", 0.05)),
                contrast=str(diag.get("contrast", "consecutive")),
                tol=float(fitting.get("tol", 1e-8)),
                param_tol=float(fitting.get("param_tol", 1e-6)),
                max_iter=int(fitting.get("max_iter", 500)),
                covariance_estimator=str(fitting.get("covariance_estimator", "model")),
                log_response=bool(data.get("log_response", False)),
                seed=int(run.get("seed", 0)),
                out_dir=str(run.get("out_dir", "results")),
                jobs=int(run.get("jobs", 1)),
                deterministic=bool(run.get("deterministic", False)),
                study=dict(study) if (study.get("preset") or study.get("design")) else None,
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid configuration value: {e}")
        out.validate()
        return out

    def validate(self) -> None:
        if not self.specs and not self.deltas:
            raise ConfigError("grid is empty: give explicit specs or a list of deltas")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"grid.alpha must lie in (0, 1), got {self.alpha}")
        if any(not 0.0 < d <= 1.0 for d in self.deltas):
            raise ConfigError(f"grid.deltas must lie in (0, 1], got {self.deltas}")
        if not 0.0 < self.level < 1.0:
            raise ConfigError(f"diagnostics.level must lie in (0, 1), got {self.level}")
        if self.k0 < 1:
            raise ConfigError(f"diagnostics.k0 is 1-based, got {self.k0}")
        if self.contrast not in CONTRASTS:
            raise ConfigError(f"diagnostics.contrast must be one of {CONTRASTS}, got '{self.contrast}'")
        if self.covariance_estimator not in COVARIANCE_ESTIMATORS:
            raise ConfigError(f"fitting.covariance_estimator must be one of {COVARIANCE_ESTIMATORS}")
        if self.tol <= 0 or self.param_tol <= 0 or self.max_iter < 1:
            raise ConfigError("fitting tolerances must be positive and max_iter at least 1")
        if self.jobs < 1:
            raise ConfigError(f"run.jobs must be at least 1, got {self.jobs}")

    def explicit_specs(self) -> List[WeightSpec]:
        out = []
        for i, entry in enumerate(self.specs, 1):
            if not isinstance(entry, dict):
                raise ConfigError(f"grid.specs entry {i} must be a mapping")
            try:
                out.append(WeightSpec.from_dict(entry))
            except (KeyError, TypeError, ValueError, CalibrationError) as e:
                raise ConfigError(f"grid.specs entry {i} is invalid: {e}")
        return out

    def fit_options(self) -> FitOptions:
        return FitOptions(tol=self.tol, param_tol=self.param_tol, max_iter=self.max_iter,
                          covariance_estimator=self.covariance_estimator)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form"""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
