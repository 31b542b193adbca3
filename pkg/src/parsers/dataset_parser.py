import csv
import math
import re
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..censtrun import CensoredIn, CensoringScheme, ExactValue, ObservationRecord, RecordSet
from ..errors import DatasetError, DomainError
from ..families import EdmFamily, Interval
from ..logger import get_module_logger

logger = get_module_logger("dataset")

REQUIRED_COLUMNS = ("y", "status")
BOUND_COLUMNS = ("trunc_lo", "trunc_hi", "cens_lo", "cens_hi")
STATUSES = ("exact", "censored")
_X_COLUMN = re.compile(r"^x(\d+)$")


class DatasetParser:
    """Reads a dataset CSV into a RecordSet.

    Columns: y, x1..xP, trunc_lo, trunc_hi, cens_lo, cens_hi, status. Empty
    bound cells are unbounded; an empty trunc_lo defaults to the lower end of
    the family's support.
    """

    def __init__(self, family: EdmFamily, log_response: bool = False):
        self.family = family
        self.log_response = log_response

    def parse(self, path) -> RecordSet:
        try:
            with open(path, "r", encoding="utf-8", newline="") as f:
                reader = csv.DictReader(f)
                x_columns = self._check_header(reader.fieldnames)
                records = []
                defaulted = 0
                for row_num, row in enumerate(reader, 1):
                    record, used_default = self._parse_row(row_num, row, x_columns)
                    records.append(record)
                    defaulted += used_default
        except FileNotFoundError:
            raise DatasetError(f"dataset file not found: {path}")
        except UnicodeDecodeError:
            raise DatasetError(f"{path} contains invalid UTF-8 characters")
        except csv.Error as e:
            raise DatasetError(f"malformed CSV in {path}: {e}")

        if not records:
            raise DatasetError(f"{path} has a header but no data rows")
        if defaulted:
            logger.warning(f"{defaulted} rows have no trunc_lo; using the {self.family.family_id.value} "
                           f"support bound {self.family.support.lo:g}")
        logger.info(f"Loaded {len(records)} records with {len(x_columns)} covariates from {path}")
        return RecordSet.from_records(records)

    def _check_header(self, fieldnames: Optional[Sequence[str]]) -> List[str]:
        if not fieldnames:
            raise DatasetError("dataset has no header row", row=0)
        fields = [name.strip() for name in fieldnames]
        for column in REQUIRED_COLUMNS:
            if column not in fields:
                raise DatasetError("required column is missing", row=0, column=column)
        numbered = sorted((int(m.group(1)), name) for name in fields if (m := _X_COLUMN.match(name)))
        if not numbered:
            raise DatasetError("no covariate columns (x1..xP)", row=0, column="x1")
        expected = list(range(1, len(numbered) + 1))
        if [i for i, _ in numbered] != expected:
            raise DatasetError(f"covariate columns must be x1..x{len(numbered)} without gaps", row=0,
                               column=numbered[-1][1])
        return [name for _, name in numbered]

    def _number(self, row_num: int, row: Dict[str, str], column: str, empty: float) -> float:
        cell = (row.get(column) or "").strip()
        if cell == "":
            return empty
        try:
            value = float(cell)
        except ValueError:
            raise DatasetError(f"'{cell}' is not a number", row_num, column)
        if math.isnan(value):
            raise DatasetError("NaN is not allowed", row_num, column)
        return value

    def _response_scale(self, value: float) -> float:
        if not self.log_response:
            return value
        if value < 0:
            return math.nan
        return -math.inf if value == 0 else math.log(value)

    def _parse_row(self, row_num: int, row: Dict[str, str], x_columns: List[str]):
        row = {(k or "").strip(): v for k, v in row.items()}
        status = (row.get("status") or "").strip().lower()
        if status not in STATUSES:
            raise DatasetError(f"status must be one of {STATUSES}, got '{status}'", row_num, "status")

        x = []
        for column in x_columns:
            cell = (row.get(column) or "").strip()
            if cell == "":
                raise DatasetError("covariate value is missing", row_num, column)
            x.append(self._number(row_num, row, column, math.nan))

        bounds = {}
        used_default = False
        for column in BOUND_COLUMNS:
            empty = math.inf if column.endswith("_hi") else -math.inf
            value = self._number(row_num, row, column, empty)
            if self.log_response and math.isfinite(value):
                value = self._response_scale(value)
                if math.isnan(value):
                    raise DatasetError("negative bound cannot be log-transformed", row_num, column)
            bounds[column] = value
        if (row.get("trunc_lo") or "").strip() == "" and self.family.support.lo > -math.inf:
            bounds["trunc_lo"] = self.family.support.lo
            used_default = True

        truncation = Interval(bounds["trunc_lo"], bounds["trunc_hi"])
        if truncation.is_empty:
            raise DatasetError(f"truncation interval {truncation} is empty", row_num, "trunc_hi")
        has_censor = (row.get("cens_lo") or "").strip() != "" or (row.get("cens_hi") or "").strip() != ""
        censor = None
        if has_censor:
            censor = Interval(max(bounds["cens_lo"], truncation.lo), bounds["cens_hi"])
            if censor.is_empty or not truncation.covers(censor):
                raise DatasetError(f"censoring interval {censor} is not inside the truncation interval "
                                   f"{truncation}", row_num, "cens_lo")
        try:
            scheme = CensoringScheme.from_limits(truncation, censor)
        except DomainError as e:
            raise DatasetError(str(e), row_num, "cens_lo")

        y_cell = (row.get("y") or "").strip()
        if status == "censored":
            if y_cell != "":
                raise DatasetError("censored rows must leave y empty", row_num, "y")
            if scheme.n_intervals == 0:
                raise DatasetError("censored rows need cens_lo or cens_hi", row_num, "cens_lo")
            outcome = CensoredIn(0)
        else:
            if y_cell == "":
                raise DatasetError("exact rows need a response", row_num, "y")
            y = self._response_scale(self._number(row_num, row, "y", math.nan))
            if math.isnan(y):
                raise DatasetError("negative response cannot be log-transformed", row_num, "y")
            outcome = ExactValue(y)

        try:
            record = ObservationRecord(tuple(x), scheme, outcome)
        except DomainError as e:
            raise DatasetError(str(e), row_num, "y" if e.parameter == "y" else "status")
        return record, used_default


class DatasetWriter:
    """Writes a RecordSet in the layout DatasetParser reads; floats use repr so re-reading is exact"""

    @staticmethod
    def _cell(value: float) -> str:
        if math.isinf(value):
            return ""
        return repr(float(value))

    def write(self, records: RecordSet, path) -> None:
        n_cov = records.n_coef
        header = ["y"] + [f"x{j + 1}" for j in range(n_cov)] + list(BOUND_COLUMNS) + ["status"]
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for i in range(records.n):
                intervals = np.flatnonzero(records.int_record == i)
                if intervals.size > 1:
                    raise DatasetError("only one censoring interval per record can be written", i + 1, "cens_lo")
                exact = records.observed[i] < 0
                cens = ("", "") if intervals.size == 0 else (
                    self._cell(records.int_lo[intervals[0]]), self._cell(records.int_hi[intervals[0]]))
                lo = records.trunc_lo[i]
                writer.writerow(
                    [repr(float(records.y[i])) if exact else ""]
                    + [repr(float(v)) for v in records.X[i]]
                    + ["-inf" if lo == -math.inf else self._cell(lo), self._cell(records.trunc_hi[i])]
                    + list(cens)
                    + ["exact" if exact else "censored"]
                )
        logger.info(f"Wrote {records.n} records to {path}")
