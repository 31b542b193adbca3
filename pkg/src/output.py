import csv
import json
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping

import numpy as np

from . import __version__


def _jsonable(value):
    """numpy scalars/arrays to plain Python; non-finite floats to strings"""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    return value


class OutputFormatter:
    def __init__(self, enable_colors: bool = True):
        self.enable_colors = enable_colors

    def generate_report(self, command: str, payload: Dict[str, Any], config_hash: str, seed: int):
        """
        Wrap a command result with its provenance header
        """
        return {
            "provenance": {
                "tool": "swle",
                "version": __version__,
                "command": command,
                "created": datetime.now(timezone.utc).isoformat().replace("+00:00", "Z"),
                "config_hash": config_hash,
                "seed": seed,
            },
            "result": _jsonable(payload),
        }

    def save_report(self, report, output_path):
        """
        Save the report to a file with automatic format detection
        """
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)

        if output_path.suffix.lower() == '.csv':
            return self._save_csv(report, output_path)
        return self._save_json(report, output_path)

    def save_text(self, text: str, output_path):
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        with open(output_path, "w", encoding='utf-8') as f:
            f.write(text + "\n")
        return True

    def _save_json(self, report, output_path):
        """Save report as JSON"""
        with open(output_path, "w", encoding='utf-8') as f:
            json.dump(report, f, indent=2, ensure_ascii=False)
        return True

    def _save_csv(self, report, output_path):
        """Save ``report['rows']`` (a list of flat dicts) as CSV with provenance columns"""
        rows: List[Mapping[str, Any]] = report.get("rows", [])
        provenance = report.get("provenance", {})
        extra = {"config_hash": provenance.get("config_hash", ""), "seed": provenance.get("seed", "")}
        columns = list(rows[0].keys()) if rows else []
        with open(output_path, "w", newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fieldnames=columns + list(extra))
            writer.writeheader()
            for row in rows:
                writer.writerow({**{k: _csv_cell(v) for k, v in row.items()}, **extra})
        return True

    def print_summary(self, report):
        """
        Print a summary of the command result to stdout with colors
        """
        def colorize(text, color_code):
            if self.enable_colors:
                return f"\033[{color_code}m{text}\033[0m"
            return text

        provenance = report["provenance"]
        result = report["result"]
        print(f"\n{colorize(provenance['command'].title() + ' Summary:', '1;36')}")
        print(f"|- Config hash: {colorize(provenance['config_hash'][:12], '33')}")
        print(f"|- Seed: {colorize(str(provenance['seed']), '33')}")

        if "fits" in result:
            for k, fit in enumerate(result["fits"], 1):
                params = fit["params"]
                values = ", ".join(f"{v:.4f}" for v in list(params["beta"]) + [params["phi"]])
                state = colorize("converged", '32') if fit["converged"] else colorize("not converged", '1;31')
                print(f"|- k={k} ({fit['spec']['mode']}): {colorize(values, '1;32')} [{state}, "
                      f"{fit['iterations']} iterations]")
        if "meta" in result:
            meta = result["meta"]
            color = '1;31' if meta["p_value"] < result.get("level", 0.05) else '32'
            p_value = f"{meta['p_value']:.3f}"
            print(f"|- Meta Wald: {meta['statistic']:.3f} (df {meta['df']}), p = {colorize(p_value, color)}")
        if "meta_rejection_rate" in result:
            print(f"|- Replications: {colorize(str(result['B']), '32')}, "
                  f"failures: {colorize(str(len(result['failures'])), '1;31' if result['failures'] else '32')}, "
                  f"support violations: {result['support_violations']}")
            rate = f"{result['meta_rejection_rate']:.3f}"
            print(f"\\- Meta rejection rate: {colorize(rate, '1;35')}")
        if "specs" in result:
            for k, spec in enumerate(result["specs"], 1):
                print(f"|- k={k}: {colorize(json.dumps(spec), '35')}")


def _csv_cell(value):
    if isinstance(value, float):
        return repr(value)
    return value


def parameter_rows(fits: Iterable[Mapping[str, Any]], names: List[str]) -> List[Dict[str, Any]]:
    """One row per (k, parameter) with estimate and standard error"""
    rows = []
    for k, fit in enumerate(fits, 1):
        estimates = list(fit["params"]["beta"]) + [fit["params"]["phi"]]
        ses = fit.get("standard_errors") or [float("nan")] * len(estimates)
        for name, estimate, se in zip(names, estimates, ses):
            rows.append({"k": k, "parameter": name, "estimate": float(estimate), "standard_error": float(se)})
    return rows
