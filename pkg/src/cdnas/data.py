"""Response logs, Q-matrix ingestion, per-student splits and batching."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.special import expit

SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.7, 0.1, 0.2)


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass
class ResponseLogs:
    """Dense-indexed response events; duplicates are kept."""

    student: np.ndarray
    exercise: np.ndarray
    score: np.ndarray
    student_ids: list = field(default_factory=list)  # dense -> raw

    def __len__(self):
        return len(self.score)

    @property
    def n_students(self) -> int:
        return len(self.student_ids)

    def subset(self, rows) -> "ResponseLogs":
        return ResponseLogs(self.student[rows], self.exercise[rows], self.score[rows], self.student_ids)


@dataclass
class QMatrix:
    matrix: np.ndarray  # (M, K) of 0/1
    exercise_ids: list  # dense -> raw
    concept_ids: list

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        bad = np.flatnonzero(self.matrix.sum(axis=1) == 0)
        if bad.size:
            raise DataError(f"Q-matrix row {int(bad[0])} ({self.exercise_ids[bad[0]]}) tags no concept")
        if not np.isin(self.matrix, (0.0, 1.0)).all():
            raise DataError("Q-matrix entries must be 0 or 1")

    @property
    def shape(self):
        return self.matrix.shape


@dataclass
class ResponseDataset:
    logs: ResponseLogs
    q: QMatrix
    splits: dict  # name -> row indices into logs
    seed: int = 0
    ratios: tuple = DEFAULT_RATIOS

    @property
    def N(self) -> int:
        return self.logs.n_students

    @property
    def M(self) -> int:
        return self.q.shape[0]

    @property
    def K(self) -> int:
        return self.q.shape[1]

    def split(self, name: str) -> ResponseLogs:
        return self.logs.subset(self.splits[name])

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "splits": {k: [int(i) for i in v] for k, v in self.splits.items()},
        }


# --- loading -------------------------------------------------------------------


def _read_rows(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    return path, [c.strip() for c in rows[0]], rows[1:]


def load_qmatrix(path) -> QMatrix:
    """Dense ``exercise_id,concept_1..concept_K`` or sparse ``exercise_id,concept_id``."""
    path, header, rows = _read_rows(path)
    if not header or header[0] != "exercise_id":
        raise DataError(f"{path}:1: header must start with exercise_id")
    sparse = header == ["exercise_id", "concept_id"]
    ex_index: dict[str, int] = {}
    if sparse:
        concepts: dict[str, int] = {}
        pairs = []
        for lineno, row in enumerate(rows, start=2):
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            e, c = (x.strip() for x in row)
            ex_index.setdefault(e, len(ex_index))
            concepts.setdefault(c, len(concepts))
            pairs.append((ex_index[e], concepts[c]))
        mat = np.zeros((len(ex_index), len(concepts)))
        for e, c in pairs:
            mat[e, c] = 1.0
        concept_ids = list(concepts)
    else:
        K = len(header) - 1
        if K < 1:
            raise DataError(f"{path}:1: no concept columns")
        mat_rows = []
        for lineno, row in enumerate(rows, start=2):
            if len(row) != K + 1:
                raise DataError(f"{path}:{lineno}: expected {K + 1} columns, got {len(row)}")
            e = row[0].strip()
            if e in ex_index:
                raise DataError(f"{path}:{lineno}: duplicate exercise {e}")
            try:
                cells = [int(x) for x in row[1:]]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer cell") from None
            if any(x not in (0, 1) for x in cells):
                raise DataError(f"{path}:{lineno}: cells must be 0 or 1")
            if not any(cells):
                raise DataError(f"{path}:{lineno}: Q-matrix row {len(ex_index)} ({e}) tags no concept")
            ex_index[e] = len(ex_index)
            mat_rows.append(cells)
        mat = np.array(mat_rows, dtype=np.float64).reshape(len(mat_rows), K)
        concept_ids = header[1:]
    if not ex_index:
        raise DataError(f"{path}: no exercises")
    return QMatrix(mat, list(ex_index), concept_ids)


def load_dataset(logs_path, q_path) -> tuple[ResponseLogs, QMatrix]:
    """Read logs and Q-matrix CSVs; raw ids are remapped in order of first appearance."""
    q = load_qmatrix(q_path)
    ex_index = {e: i for i, e in enumerate(q.exercise_ids)}
    path, header, rows = _read_rows(logs_path)
    if header != ["student_id", "exercise_id", "score"]:
        raise DataError(f"{path}:1: header must be student_id,exercise_id,score")
    st_index: dict[str, int] = {}
    s_col, e_col, r_col = [], [], []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
        s, e, r = (x.strip() for x in row)
        if r not in ("0", "1"):
            raise DataError(f"{path}:{lineno}: score must be 0 or 1, got {r!r}")
        if e not in ex_index:
            raise DataError(f"{path}:{lineno}: exercise {e} is missing from the Q-matrix")
        st_index.setdefault(s, len(st_index))
        s_col.append(st_index[s])
        e_col.append(ex_index[e])
        r_col.append(int(r))
    if not s_col:
        raise DataError(f"{path}: no response logs")
    logs = ResponseLogs(
        np.array(s_col, dtype=np.int64), np.array(e_col, dtype=np.int64),
        np.array(r_col, dtype=np.int8), list(st_index),
    )
    return logs, q


def filter_students(logs: ResponseLogs, min_logs: int = 15) -> ResponseLogs:
    """Drop students with fewer than ``min_logs`` events and re-densify ids."""
    counts = np.bincount(logs.student, minlength=logs.n_students)
    keep_students = np.flatnonzero(counts >= min_logs)
    if keep_students.size == 0:
        raise DataError(f"no student has at least {min_logs} logs")
    remap = np.full(logs.n_students, -1, dtype=np.int64)
    remap[keep_students] = np.arange(keep_students.size)
    rows = remap[logs.student] >= 0
    return ResponseLogs(
        remap[logs.student[rows]], logs.exercise[rows], logs.score[rows],
        [logs.student_ids[i] for i in keep_students],
    )


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def split_per_student(logs: ResponseLogs, ratios=DEFAULT_RATIOS, seed: int = 0) -> dict:
    """Shuffle each student's rows and cut at round(r0*n) and round((r0+r1)*n)."""
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError(f"ratios must be three nonnegative numbers, got {ratios}")
    fr = [Fraction(str(r)) for r in ratios]
    if sum(fr) != 1:
        raise ConfigError(f"ratios must sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    order = np.argsort(logs.student, kind="stable")
    bounds = np.searchsorted(logs.student[order], np.arange(logs.n_students + 1))
    out = {k: [] for k in SPLITS}
    for s in range(logs.n_students):
        rows = order[bounds[s]:bounds[s + 1]]
        rows = rows[rng.permutation(len(rows))]
        n = len(rows)
        a = _round_half_up(fr[0] * n)
        b = _round_half_up((fr[0] + fr[1]) * n)
        out["train"].append(rows[:a])
        out["val"].append(rows[a:b])
        out["test"].append(rows[b:])
    return {k: np.sort(np.concatenate(v)).astype(np.int64) for k, v in out.items()}


def build_dataset(logs: ResponseLogs, q: QMatrix, ratios=DEFAULT_RATIOS, seed: int = 0,
                  min_logs: int = 15) -> ResponseDataset:
    """Filter sparse students, then split per student."""
    logs = filter_students(logs, min_logs)
    return ResponseDataset(logs, q, split_per_student(logs, ratios, seed), seed, tuple(ratios))


def batches(n_rows: int, batch_size: int = 128, seed: int = 0, epoch: int = 0) -> list[np.ndarray]:
    """Positions ``0..n_rows-1`` shuffled per (seed, epoch), cut into batches."""
    perm = np.random.default_rng([seed, epoch]).permutation(n_rows)
    return [perm[i:i + batch_size] for i in range(0, n_rows, batch_size)]


# --- persistence ------------------------------------------------------------------


def save_split_manifest(dataset: ResponseDataset, path) -> None:
    Path(path).write_text(json.dumps(dataset.manifest(), sort_keys=True) + "\n")


def load_split_manifest(path) -> dict:
    obj = json.loads(Path(path).read_text())
    return {k: np.asarray(v, dtype=np.int64) for k, v in obj["splits"].items()}


def write_logs_csv(logs: ResponseLogs, q: QMatrix, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["student_id", "exercise_id", "score"])
        for s, e, r in zip(logs.student, logs.exercise, logs.score):
            w.writerow([logs.student_ids[s], q.exercise_ids[e], int(r)])


def write_qmatrix_csv(q: QMatrix, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["exercise_id", *q.concept_ids])
        for e, row in zip(q.exercise_ids, q.matrix.astype(int)):
            w.writerow([e, *row.tolist()])


def fingerprint(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


# --- synthetic data --------------------------------------------------------------


@dataclass
class PlantedMF:
    logs: ResponseLogs
    q: QMatrix
    student_factors: np.ndarray
    exercise_factors: np.ndarray

    def true_probability(self, students, exercises) -> np.ndarray:
        return expit(np.sum(self.student_factors[students] * self.exercise_factors[exercises], axis=1))


def make_planted_mf(n_students: int = 200, n_exercises: int = 100, n_concepts: int = 8,
                    logs_per_student: int = 40, leading_variance: float = 8.0, decay: float = 0.25,
                    seed: int = 0) -> PlantedMF:
    """Responses drawn from ``Bernoulli(sigmoid(<w_s, w_e>))`` with Gaussian factors.

    Factor column ``k`` has variance ``leading_variance * decay**k`` for both
    students and exercises, so a few directions (an ability-like axis first)
    carry most of the signal.  Each student answers ``logs_per_student``
    distinct exercises; each exercise tags one to three concepts.
    """
    rng = np.random.default_rng(seed)
    col_std = np.sqrt(leading_variance * decay ** np.arange(n_concepts))
    ws = rng.normal(size=(n_students, n_concepts)) * col_std
    we = rng.normal(size=(n_exercises, n_concepts)) * col_std
    q = np.zeros((n_exercises, n_concepts))
    for j in range(n_exercises):
        q[j, rng.choice(n_concepts, size=rng.integers(1, 4), replace=False)] = 1.0
    per = min(logs_per_student, n_exercises)
    students = np.repeat(np.arange(n_students), per)
    exercises = np.concatenate([rng.choice(n_exercises, size=per, replace=False) for _ in range(n_students)])
    p = expit(np.sum(ws[students] * we[exercises], axis=1))
    scores = (rng.random(p.shape) < p).astype(np.int8)
    logs = ResponseLogs(students, exercises, scores, [f"s{i}" for i in range(n_students)])
    qm = QMatrix(q, [f"e{j}" for j in range(n_exercises)], [f"c{k}" for k in range(n_concepts)])
    return PlantedMF(logs, qm, ws, we)
