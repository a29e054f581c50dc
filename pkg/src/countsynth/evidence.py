"""Study records, CSV ingestion, subset classification, format conversions.

Input is a comma-separated table with header

    study,group,arm,patients,duration_yr,rate,std_err,total,zeroes

where ``arm`` is ``P`` (placebo) or ``L`` (active treatment), an empty
cell means "not reported", and consecutive rows sharing a ``study`` value
form one study.  The ``group`` column records the most informative subset
label (A, B or C) for human readers; parsers ignore it and
:func:`classify_subset` recomputes it.

Subset semantics (cumulative):

* ``A``  every arm reports a rate estimate with a standard error,
* ``B``  in A, or every arm reports both a total count and a zero count,
* ``C``  in B, or every arm reports at least one of the two counts.
"""

from __future__ import annotations

import csv
import enum
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from io import StringIO
from pathlib import Path
from statistics import NormalDist
from typing import IO, Iterable, Sequence

__all__ = [
    "TreatmentClass",
    "ArmRecord",
    "StudyRecord",
    "SubsetLabel",
    "ParseError",
    "EvidenceWarning",
    "CSV_HEADER",
    "parse_dataset",
    "serialize_dataset",
    "classify_subset",
    "subset_tallies",
    "reporting_crosstab",
    "derive_total",
    "se_from_ci",
    "load_reference_dataset",
]

CSV_HEADER = (
    "study",
    "group",
    "arm",
    "patients",
    "duration_yr",
    "rate",
    "std_err",
    "total",
    "zeroes",
)

_REFERENCE_RESOURCE = "copd_lama.csv"


class ParseError(ValueError):
    """Malformed input table; carries the offending 1-based row number."""

    def __init__(self, message: str, row: int | None = None) -> None:
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


class EvidenceWarning(UserWarning):
    """Diagnostic about records that were excluded rather than rejected."""


class TreatmentClass(enum.Enum):
    PLACEBO = "placebo"
    ACTIVE = "active"


class SubsetLabel(enum.Enum):
    """Nested data subsets; A is the most, C the least demanding."""

    A = "A"
    B = "B"
    C = "C"


@dataclass(frozen=True)
class ArmRecord:
    """One study arm with whichever aggregate results it published."""

    treatment_class: TreatmentClass
    n_patients: int
    rate_est: float | None = None
    std_err: float | None = None
    total: int | None = None
    zeroes: int | None = None

    def __post_init__(self) -> None:
        if self.n_patients < 1:
            raise ValueError(f"n_patients must be >= 1, got {self.n_patients}")
        if self.zeroes is not None and not 0 <= self.zeroes <= self.n_patients:
            raise ValueError(
                f"zeroes must lie in [0, {self.n_patients}], got {self.zeroes}"
            )
        if self.total is not None and self.total < 0:
            raise ValueError(f"total must be >= 0, got {self.total}")
        for name in ("rate_est", "std_err"):
            value = getattr(self, name)
            if value is not None and (value <= 0 or not math.isfinite(value)):
                raise ValueError(f"{name} must be a positive number, got {value}")

    @property
    def has_evidence(self) -> bool:
        """True when the arm can contribute to any likelihood."""
        return (
            self.total is not None
            or self.zeroes is not None
            or (self.rate_est is not None and self.std_err is not None)
            or self.rate_est is not None
        )

    @property
    def has_se_pair(self) -> bool:
        return self.rate_est is not None and self.std_err is not None


@dataclass(frozen=True)
class StudyRecord:
    """A study: identifier, common arm duration in years, and its arms."""

    study_id: str
    duration: float
    arms: tuple[ArmRecord, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if not self.study_id:
            raise ValueError("study_id must be non-empty")
        if not (self.duration > 0 and math.isfinite(self.duration)):
            raise ValueError(f"duration must be > 0, got {self.duration}")
        object.__setattr__(self, "arms", tuple(self.arms))
        if len(self.arms) < 2:
            raise ValueError(
                f"study {self.study_id!r} needs >= 2 arms, got {len(self.arms)}"
            )
        n_placebo = sum(
            arm.treatment_class is TreatmentClass.PLACEBO for arm in self.arms
        )
        if n_placebo != 1:
            raise ValueError(
                f"study {self.study_id!r} needs exactly one placebo arm, "
                f"got {n_placebo}"
            )

    @property
    def placebo_arm(self) -> ArmRecord:
        return next(
            arm
            for arm in self.arms
            if arm.treatment_class is TreatmentClass.PLACEBO
        )

    @property
    def active_arms(self) -> tuple[ArmRecord, ...]:
        return tuple(
            arm
            for arm in self.arms
            if arm.treatment_class is TreatmentClass.ACTIVE
        )


# ---------------------------------------------------------------------------
# Parsing and serialization.


def _parse_cell(text: str, kind: str, column: str, row: int):
    text = text.strip()
    if text == "":
        return None
    try:
        if kind == "int":
            # Reject fractional strings rather than silently truncating.
            value = int(text)
        else:
            value = float(text)
            if not math.isfinite(value):
                raise ValueError
    except ValueError:
        raise ParseError(
            f"malformed {kind} in column {column!r}: {text!r}", row=row
        ) from None
    return value


def _finish_study(
    study_id: str,
    duration: float | None,
    arms: list[ArmRecord],
    first_row: int,
) -> StudyRecord:
    if duration is None or not arms:
        raise ParseError(f"study {study_id!r} has no usable arms", row=first_row)
    try:
        return StudyRecord(study_id=study_id, duration=duration, arms=tuple(arms))
    except ValueError as exc:
        raise ParseError(str(exc), row=first_row) from exc


def parse_dataset(source: str | Path | IO[str] | Iterable[str]) -> list[StudyRecord]:
    """Parse the CSV schema into study records.

    ``source`` may be a path, an open text stream, or any iterable of
    lines.  Arms carrying no evidence at all are excluded with an
    :class:`EvidenceWarning` naming the row; structural problems
    (bad header, malformed numbers, duplicate placebo arms, studies with
    fewer than two usable arms) raise :class:`ParseError` with the
    offending row number.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8", newline="") as handle:
            return parse_dataset(handle)

    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("no studies: input is empty", row=1) from None
    if tuple(cell.strip() for cell in header) != CSV_HEADER:
        raise ParseError(
            f"header must be {','.join(CSV_HEADER)!r}, got {','.join(header)!r}",
            row=1,
        )

    studies: list[StudyRecord] = []
    current_id: str | None = None
    current_duration: float | None = None
    current_arms: list[ArmRecord] = []
    current_first_row = 2

    for row_num, row in enumerate(reader, start=2):
        if not row or all(cell.strip() == "" for cell in row):
            continue
        if len(row) != len(CSV_HEADER):
            raise ParseError(
                f"expected {len(CSV_HEADER)} columns, got {len(row)}", row=row_num
            )
        study_id = row[0].strip()
        if not study_id:
            raise ParseError("empty study identifier", row=row_num)
        arm_code = row[2].strip().upper()
        if arm_code not in ("P", "L"):
            raise ParseError(f"arm must be P or L, got {row[2]!r}", row=row_num)
        patients = _parse_cell(row[3], "int", "patients", row_num)
        duration = _parse_cell(row[4], "float", "duration_yr", row_num)
        if patients is None or duration is None:
            raise ParseError("patients and duration_yr are required", row=row_num)
        values = {
            "rate_est": _parse_cell(row[5], "float", "rate", row_num),
            "std_err": _parse_cell(row[6], "float", "std_err", row_num),
            "total": _parse_cell(row[7], "int", "total", row_num),
            "zeroes": _parse_cell(row[8], "int", "zeroes", row_num),
        }
        try:
            arm = ArmRecord(
                treatment_class=(
                    TreatmentClass.PLACEBO
                    if arm_code == "P"
                    else TreatmentClass.ACTIVE
                ),
                n_patients=patients,
                **values,
            )
        except ValueError as exc:
            raise ParseError(str(exc), row=row_num) from exc

        if study_id != current_id:
            if current_id is not None:
                studies.append(
                    _finish_study(
                        current_id, current_duration, current_arms, current_first_row
                    )
                )
            current_id = study_id
            current_duration = duration
            current_arms = []
            current_first_row = row_num
        elif current_duration is not None and duration != current_duration:
            raise ParseError(
                f"study {study_id!r} mixes durations "
                f"{current_duration} and {duration}",
                row=row_num,
            )

        if not arm.has_evidence:
            warnings.warn(
                f"row {row_num}: arm of study {study_id!r} reports no evidence "
                "and is excluded",
                EvidenceWarning,
                stacklevel=2,
            )
            continue
        current_arms.append(arm)

    if current_id is None:
        raise ParseError("no studies: input has a header but no rows", row=1)
    studies.append(
        _finish_study(current_id, current_duration, current_arms, current_first_row)
    )
    return studies


def _format_number(value: float | int | None) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return repr(value)


def serialize_dataset(studies: Sequence[StudyRecord]) -> str:
    """Render studies back to the canonical CSV text.

    Writing then re-parsing is the identity on records, and re-serializing
    a canonical file reproduces it byte for byte.
    """
    buffer = StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for study in studies:
        labels = classify_subset(study)
        group = min(labels, key=lambda lab: lab.value).value if labels else ""
        for arm in study.arms:
            writer.writerow(
                [
                    study.study_id,
                    group,
                    "P" if arm.treatment_class is TreatmentClass.PLACEBO else "L",
                    arm.n_patients,
                    _format_number(study.duration),
                    _format_number(arm.rate_est),
                    _format_number(arm.std_err),
                    _format_number(arm.total),
                    _format_number(arm.zeroes),
                ]
            )
    return buffer.getvalue()


# ---------------------------------------------------------------------------
# Classification and tallies.


def classify_subset(study: StudyRecord) -> set[SubsetLabel]:
    """Which of the nested subsets A/B/C the study belongs to.

    Labels are cumulative: membership in A implies B and C.  Arms without
    any evidence are excluded from the determination with an
    :class:`EvidenceWarning` (they never occur in records produced by
    :func:`parse_dataset`, which already drops them).
    """
    arms = []
    for arm in study.arms:
        if arm.has_evidence:
            arms.append(arm)
        else:
            warnings.warn(
                f"study {study.study_id!r}: arm without evidence excluded "
                "from subset classification",
                EvidenceWarning,
                stacklevel=2,
            )
    if not arms:
        return set()
    in_a = all(arm.has_se_pair for arm in arms)
    in_b = in_a or all(
        arm.total is not None and arm.zeroes is not None for arm in arms
    )
    in_c = in_b or all(
        arm.total is not None or arm.zeroes is not None for arm in arms
    )
    labels: set[SubsetLabel] = set()
    if in_a:
        labels.add(SubsetLabel.A)
    if in_b:
        labels.add(SubsetLabel.B)
    if in_c:
        labels.add(SubsetLabel.C)
    return labels


def subset_tallies(studies: Sequence[StudyRecord]) -> dict[SubsetLabel, int]:
    """Number of studies in each cumulative subset."""
    counts = {label: 0 for label in SubsetLabel}
    for study in studies:
        for label in classify_subset(study):
            counts[label] += 1
    return counts


def reporting_crosstab(studies: Sequence[StudyRecord]) -> dict[str, int]:
    """Cross-tabulate count reporting among studies without standard errors.

    Returns the four cells ``total_only``, ``zero_only``, ``both`` and
    ``neither`` (studies where every arm provides the named counts), plus
    ``se_studies`` for the studies excluded from the cross-tab because
    they report standard errors throughout.
    """
    cells = {
        "se_studies": 0,
        "total_only": 0,
        "zero_only": 0,
        "both": 0,
        "neither": 0,
    }
    for study in studies:
        if SubsetLabel.A in classify_subset(study):
            cells["se_studies"] += 1
            continue
        has_total = all(arm.total is not None for arm in study.arms)
        has_zero = all(arm.zeroes is not None for arm in study.arms)
        if has_total and has_zero:
            cells["both"] += 1
        elif has_total:
            cells["total_only"] += 1
        elif has_zero:
            cells["zero_only"] += 1
        else:
            cells["neither"] += 1
    return cells


# ---------------------------------------------------------------------------
# Report-format conversions.


def derive_total(rate_est: float, n: int, duration: float) -> int:
    """Total event count implied by a rate estimate: round(rate * n * duration).

    Rounds to the nearest integer with ties to even; exact whenever the
    product is integral.
    """
    if rate_est <= 0 or n <= 0 or duration <= 0:
        raise ValueError("rate_est, n and duration must all be positive")
    return round(rate_est * n * duration)


def se_from_ci(lower: float, upper: float, level: float = 0.95) -> float:
    """Standard error recovered from a central confidence interval.

    ``(upper - lower) / (2 * q)`` with ``q`` the standard-normal quantile
    at ``(1 + level) / 2``.
    """
    if not upper > lower:
        raise ValueError(f"need upper > lower, got [{lower}, {upper}]")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    quantile = NormalDist().inv_cdf((1.0 + level) / 2.0)
    return (upper - lower) / (2.0 * quantile)


def load_reference_dataset() -> list[StudyRecord]:
    """The bundled reference dataset: 24 randomized COPD trials.

    Each study compares a long-acting muscarinic antagonist against
    placebo and reports exacerbation outcomes in one of the aggregate
    formats handled by this package.
    """
    resource = resources.files("countsynth").joinpath(
        f"data/{_REFERENCE_RESOURCE}"
    )
    with resource.open("r", encoding="utf-8", newline="") as handle:
        return parse_dataset(handle)


def reference_dataset_text() -> str:
    """Raw CSV text of the bundled reference dataset."""
    resource = resources.files("countsynth").joinpath(
        f"data/{_REFERENCE_RESOURCE}"
    )
    return resource.read_text(encoding="utf-8")
