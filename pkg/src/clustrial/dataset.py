"""Trial data model, CSV ingestion and center weighting."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError


class Family(str, enum.Enum):
    GAUSSIAN = "gaussian"
    BINOMIAL = "binomial"

    @classmethod
    def parse(cls, value) -> "Family":
        if isinstance(value, Family):
            return value
        key = str(value).lower().replace("-", "_")
        if key in ("binomial", "binomial_logit", "binary", "logit"):
            return cls.BINOMIAL
        if key in ("gaussian", "continuous", "normal", "identity"):
            return cls.GAUSSIAN
        raise DataError(f"unknown outcome family {value!r}")


class WeightScheme(str, enum.Enum):
    """How per-center estimates are pooled.

    ``EQUAL_CENTERS`` targets a random center (w(c) = 1/k);
    ``EQUAL_PATIENTS`` targets a random patient (w(c) = n_c / n).
    """

    EQUAL_CENTERS = "equal_centers"
    EQUAL_PATIENTS = "equal_patients"

    @classmethod
    def parse(cls, value) -> "WeightScheme":
        if isinstance(value, WeightScheme):
            return value
        key = str(value).lower().replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            raise DataError(f"unknown weight scheme {value!r}") from None


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    center_id: str
    treatment: int
    covariates: tuple[float, ...]
    outcome: float
    cluster_id: str | None = None


@dataclass(frozen=True)
class ColumnSchema:
    """Maps CSV header names onto the roles a record needs."""

    outcome: str
    treatment: str
    center: str
    covariates: tuple[str, ...] = ()
    cluster: str | None = None
    patient: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnSchema":
        return cls(
            outcome=d["outcome"],
            treatment=d["treatment"],
            center=d["center"],
            covariates=tuple(d.get("covariates", ())),
            cluster=d.get("cluster"),
            patient=d.get("patient"),
        )


def _encode(labels: Sequence[str]) -> tuple[tuple[str, ...], np.ndarray]:
    """Integer codes in first-appearance order."""
    seen: dict[str, int] = {}
    codes = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        codes[i] = seen.setdefault(lab, len(seen))
    return tuple(seen), codes


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Immutable, column-oriented collection of patient records.

    Centers (and clusters) are enumerated in order of first appearance and
    every per-center output in the package follows that order.
    """

    patient_ids: tuple[str, ...]
    center_labels: tuple[str, ...]
    treatment: np.ndarray
    covariates: np.ndarray
    outcome: np.ndarray
    family: Family
    covariate_names: tuple[str, ...] = ()
    cluster_labels: tuple[str, ...] | None = None
    center_ids: tuple[str, ...] = field(init=False)
    center: np.ndarray = field(init=False)
    cluster_ids: tuple[str, ...] | None = field(init=False)
    cluster: np.ndarray | None = field(init=False)

    def __post_init__(self):
        put = object.__setattr__
        n = len(self.patient_ids)
        put(self, "family", Family.parse(self.family))
        t_raw = np.asarray(self.treatment, dtype=float)
        bad = np.flatnonzero((t_raw != 0) & (t_raw != 1))
        if bad.size:
            raise DataError("treatment must be 0 or 1", row=int(bad[0]) + 1)
        put(self, "treatment", _frozen(t_raw, np.int8))
        put(self, "outcome", _frozen(self.outcome, float))
        cov = np.array(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(n, -1) if n else cov.reshape(0, 0)
        put(self, "covariates", _frozen(cov, float))
        if not self.covariate_names:
            put(self, "covariate_names", tuple(f"x{j}" for j in range(cov.shape[1])))
        if len(self.center_labels) != n or self.treatment.shape != (n,) or self.outcome.shape != (n,):
            raise DataError("column lengths differ")
        if cov.shape[0] != n or cov.shape[1] != len(self.covariate_names):
            raise DataError("covariate matrix does not match covariate names")
        ids, codes = _encode(self.center_labels)
        put(self, "center_ids", ids)
        put(self, "center", _frozen(codes, np.int64))
        if self.cluster_labels is not None:
            if len(self.cluster_labels) != n:
                raise DataError("cluster column length differs")
            # clusters are nested in centers: the same label in two centers is two clusters
            keyed = [f"{c}\x1f{j}" for c, j in zip(self.center_labels, self.cluster_labels)]
            _, ccodes = _encode(keyed)
            first = {}
            for lab, code in zip(self.cluster_labels, ccodes):
                first.setdefault(int(code), lab)
            put(self, "cluster_ids", tuple(first[i] for i in range(len(first))))
            put(self, "cluster", _frozen(ccodes, np.int64))
        else:
            put(self, "cluster_ids", None)
            put(self, "cluster", None)
        self._validate()

    def _validate(self):
        if not np.all(np.isfinite(self.outcome)):
            raise DataError("non-finite outcome", row=int(np.flatnonzero(~np.isfinite(self.outcome))[0]) + 1)
        if self.family is Family.BINOMIAL:
            bad = np.flatnonzero((self.outcome != 0) & (self.outcome != 1))
            if bad.size:
                raise DataError("binomial outcome must be 0 or 1", row=int(bad[0]) + 1)
        if self.covariates.size and not np.all(np.isfinite(self.covariates)):
            row = int(np.flatnonzero(~np.all(np.isfinite(self.covariates), axis=1))[0])
            raise DataError("non-finite covariate", row=row + 1)
        if len(self.center_ids) < 2:
            raise DataError("at least 2 distinct centers are required")

    # -- derived quantities -------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.patient_ids)

    @property
    def k(self) -> int:
        return len(self.center_ids)

    @property
    def n_c(self) -> np.ndarray:
        return np.bincount(self.center, minlength=self.k)

    @property
    def J(self) -> int:
        return 0 if self.cluster_ids is None else len(self.cluster_ids)

    @property
    def J_c(self) -> np.ndarray:
        """Number of distinct clusters per center."""
        if self.cluster is None:
            raise DataError("dataset has no cluster column")
        center_of = np.zeros(self.J, dtype=np.int64)
        center_of[self.cluster] = self.center
        return np.bincount(center_of, minlength=self.k)

    @property
    def records(self) -> list[PatientRecord]:
        out = []
        for i in range(self.n):
            out.append(
                PatientRecord(
                    patient_id=self.patient_ids[i],
                    center_id=self.center_labels[i],
                    treatment=int(self.treatment[i]),
                    covariates=tuple(float(v) for v in self.covariates[i]),
                    outcome=float(self.outcome[i]),
                    cluster_id=None if self.cluster_labels is None else self.cluster_labels[i],
                )
            )
        return out

    # -- constructors / transforms -----------------------------------------
    @classmethod
    def from_records(cls, records: Iterable[PatientRecord], family, covariate_names=()) -> "TrialDataset":
        records = list(records)
        widths = {len(r.covariates) for r in records}
        if len(widths) > 1:
            raise DataError("covariate vectors have different lengths")
        p = widths.pop() if widths else 0
        clusters = [r.cluster_id for r in records]
        has_cluster = any(c is not None for c in clusters)
        if has_cluster and any(c is None for c in clusters):
            raise DataError("cluster id missing on some records")
        return cls(
            patient_ids=tuple(r.patient_id for r in records),
            center_labels=tuple(r.center_id for r in records),
            treatment=[r.treatment for r in records],
            covariates=np.array([r.covariates for r in records], dtype=float).reshape(len(records), p),
            outcome=[r.outcome for r in records],
            family=family,
            covariate_names=tuple(covariate_names),
            cluster_labels=tuple(clusters) if has_cluster else None,
        )

    @classmethod
    def from_arrays(cls, center, treatment, outcome, covariates=None, family="gaussian",
                    covariate_names=(), cluster=None, patient_ids=None) -> "TrialDataset":
        center = [str(c) for c in np.asarray(center).tolist()]
        n = len(center)
        if covariates is None:
            covariates = np.zeros((n, 0))
        if patient_ids is None:
            patient_ids = tuple(str(i + 1) for i in range(n))
        return cls(
            patient_ids=tuple(patient_ids),
            center_labels=tuple(center),
            treatment=treatment,
            covariates=np.asarray(covariates, dtype=float).reshape(n, -1),
            outcome=outcome,
            family=family,
            covariate_names=tuple(covariate_names),
            cluster_labels=None if cluster is None else tuple(str(c) for c in np.asarray(cluster).tolist()),
        )

    def with_outcome(self, outcome, family=None) -> "TrialDataset":
        """Same patients, different outcome column (used to fit treatment models)."""
        return TrialDataset(
            patient_ids=self.patient_ids,
            center_labels=self.center_labels,
            treatment=self.treatment,
            covariates=self.covariates,
            outcome=outcome,
            family=self.family if family is None else family,
            covariate_names=self.covariate_names,
            cluster_labels=self.cluster_labels,
        )

    def to_csv(self, path, schema: ColumnSchema | None = None) -> ColumnSchema:
        """Write the dataset; floats are written with ``repr`` so reloading is exact."""
        if schema is None:
            schema = ColumnSchema(
                outcome="y", treatment="a", center="center",
                covariates=self.covariate_names,
                cluster="cluster" if self.cluster_labels is not None else None,
                patient="id",
            )
        header = [schema.patient or "id", schema.center]
        if schema.cluster:
            header.append(schema.cluster)
        header += [schema.treatment, schema.outcome, *schema.covariates]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(self.n):
                row = [self.patient_ids[i], self.center_labels[i]]
                if schema.cluster:
                    row.append(self.cluster_labels[i])
                row += [int(self.treatment[i]), repr(float(self.outcome[i]))]
                row += [repr(float(v)) for v in self.covariates[i]]
                w.writerow(row)
        return schema


def _number(text: str, column: str, row: int) -> float:
    text = text.strip()
    if text == "" or text.upper() in ("NA", "NAN", "NULL"):
        raise DataError(f"missing value in column {column!r}", row=row)
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"non-numeric value {text!r} in column {column!r}", row=row) from None
    if not math.isfinite(value):
        raise DataError(f"non-finite value in column {column!r}", row=row)
    return value


def load_csv(path, schema: ColumnSchema, family) -> TrialDataset:
    """Read and validate a trial CSV.

    Row numbers in error messages count data rows from 1 (the header is
    not counted).
    """
    family = Family.parse(family)
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        wanted = [schema.outcome, schema.treatment, schema.center, *schema.covariates]
        wanted += [c for c in (schema.cluster, schema.patient) if c]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataError(f"missing column(s): {', '.join(missing)}")
        ids, centers, clusters, a, y, x = [], [], [], [], [], []
        for row_no, row in enumerate(reader, start=1):
            center = (row[schema.center] or "").strip()
            if center == "":
                raise DataError(f"missing value in column {schema.center!r}", row=row_no)
            centers.append(center)
            if schema.cluster:
                cl = (row[schema.cluster] or "").strip()
                if cl == "":
                    raise DataError(f"missing value in column {schema.cluster!r}", row=row_no)
                clusters.append(cl)
            ids.append(row[schema.patient].strip() if schema.patient else str(row_no))
            t = _number(row[schema.treatment], schema.treatment, row_no)
            if t not in (0.0, 1.0):
                raise DataError(f"treatment value {row[schema.treatment].strip()!r} is not 0 or 1", row=row_no)
            a.append(int(t))
            out = _number(row[schema.outcome], schema.outcome, row_no)
            if family is Family.BINOMIAL and out not in (0.0, 1.0):
                raise DataError(f"binomial outcome {row[schema.outcome].strip()!r} is not 0 or 1", row=row_no)
            y.append(out)
            x.append([_number(row[c], c, row_no) for c in schema.covariates])
    if not ids:
        raise DataError("no data rows")
    return TrialDataset(
        patient_ids=tuple(ids),
        center_labels=tuple(centers),
        treatment=a,
        covariates=np.array(x, dtype=float).reshape(len(ids), len(schema.covariates)),
        outcome=y,
        family=family,
        covariate_names=tuple(schema.covariates),
        cluster_labels=tuple(clusters) if schema.cluster else None,
    )


def weights_from_sizes(n_c, scheme) -> np.ndarray:
    scheme = WeightScheme.parse(scheme)
    n_c = np.asarray(n_c, dtype=float)
    if scheme is WeightScheme.EQUAL_CENTERS:
        return np.full(n_c.shape, 1.0 / n_c.size)
    return n_c / n_c.sum()


def center_weights(data: TrialDataset, scheme) -> list[tuple[str, float]]:
    """Pooling weights w(c), in center enumeration order; they sum to one."""
    w = weights_from_sizes(data.n_c, scheme)
    return list(zip(data.center_ids, w.tolist()))
