"""Linear-kernel CKA between layer representations, layerwise tables, global index."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError

DEGENERATE_EPS = 1e-12


class DegenerateRepresentation(ValueError):
    """A representation is constant across probe examples, so CKA is undefined."""


@dataclass
class ReprMatrix:
    values: np.ndarray
    layer: str = ""
    model_id: str = ""


def _values(x) -> np.ndarray:
    arr = np.asarray(x.values if isinstance(x, ReprMatrix) else x, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"representation must be 2-D [m, d], got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise ContractError("need at least 2 examples")
    if not np.isfinite(arr).all():
        raise ValueError("representation contains NaN or Inf")
    return arr


def gram_linear(x) -> np.ndarray:
    """``K = X X^T``."""
    x = _values(x)
    return x @ x.T


def center_gram(k: np.ndarray) -> np.ndarray:
    """``H K H`` with ``H = I - 11^T / m``."""
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ContractError(f"Gram matrix must be square, got {k.shape}")
    m = k.shape[0]
    h = np.eye(m) - np.full((m, m), 1.0 / m)
    return h @ k @ h


def hsic0(k: np.ndarray, l: np.ndarray) -> float:
    """``vec(K0) . vec(L0) / (m - 1)^2``."""
    k = np.asarray(k, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    if k.shape != l.shape:
        raise ContractError(f"Gram sizes differ: {k.shape} vs {l.shape}")
    m = k.shape[0]
    if m < 2:
        raise ContractError("need at least 2 examples")
    return float(center_gram(k).reshape(-1) @ center_gram(l).reshape(-1)) / (m - 1) ** 2


def cka(x, y) -> float:
    """Linear CKA between ``X [m, d1]`` and ``Y [m, d2]``.

    Raises :class:`DegenerateRepresentation` when either self-HSIC is at most
    ``1e-12`` times the squared norm of its uncentered Gram matrix.
    """
    x, y = _values(x), _values(y)
    if x.shape[0] != y.shape[0]:
        raise ContractError(f"example counts differ: {x.shape[0]} vs {y.shape[0]}")
    k, l = gram_linear(x), gram_linear(y)
    m = x.shape[0]
    kk, ll = hsic0(k, k), hsic0(l, l)
    for self_term, g in ((kk, k), (ll, l)):
        scale = float(g.reshape(-1) @ g.reshape(-1)) / (m - 1) ** 2
        if scale == 0.0 or self_term <= DEGENERATE_EPS * scale:
            raise DegenerateRepresentation("degenerate representation")
    return hsic0(k, l) / math.sqrt(kk * ll)


def map_layer(j: int, n_student: int, n_teacher: int) -> int:
    """Teacher block index paired with student block ``j`` (rounded proportional)."""
    if n_student == n_teacher:
        return j
    return int(math.floor(j * (n_teacher - 1) / max(1, n_student - 1) + 0.5))


@dataclass
class SimilarityTable:
    teacher_layers: list[str]
    student_layers: list[str]
    scores: np.ndarray
    mapping: dict[str, str]

    def score(self, teacher_layer: str, student_layer: str) -> float:
        return float(self.scores[self.teacher_layers.index(teacher_layer),
                                 self.student_layers.index(student_layer)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer"] + self.student_layers)
        for i, name in enumerate(self.teacher_layers):
            w.writerow([name] + [repr(float(v)) for v in self.scores[i]])
        return buf.getvalue()

    def mapping_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["student_layer", "teacher_layer", "cka"])
        for s in self.student_layers:
            t = self.mapping[s]
            w.writerow([s, t, repr(self.score(t, s))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, mapping_text: str | None = None) -> "SimilarityTable":
        rows = list(csv.reader(io.StringIO(text)))
        students = rows[0][1:]
        teachers = [r[0] for r in rows[1:]]
        scores = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        mapping = {}
        if mapping_text:
            for r in csv.DictReader(io.StringIO(mapping_text)):
                mapping[r["student_layer"]] = r["teacher_layer"]
        return cls(teachers, students, scores, mapping)


def _split(taps):
    enc = [t for t in taps if t.name.startswith("enc.")]
    dec = [t for t in taps if t.name.startswith("dec.")]
    return enc, dec


def layerwise_table(teacher_taps, student_taps) -> SimilarityTable:
    """Full teacher x student CKA grid plus the per-student-layer pairing."""
    if not teacher_taps or not student_taps:
        raise ContractError("empty tap list")
    m = {t.values.shape[0] for t in teacher_taps} | {t.values.shape[0] for t in student_taps}
    if len(m) != 1:
        raise ContractError(f"probe batches differ in size: {sorted(m)}")
    scores = np.array([[cka(t.values, s.values) for s in student_taps] for t in teacher_taps])
    mapping = {}
    for group_t, group_s in zip(_split(teacher_taps), _split(student_taps)):
        for j, s in enumerate(group_s):
            if group_t:
                mapping[s.name] = group_t[map_layer(j, len(group_s), len(group_t))].name
    return SimilarityTable([t.name for t in teacher_taps], [s.name for s in student_taps],
                           scores, mapping)


def global_index(table: SimilarityTable) -> float:
    """Mean CKA over the mapped (student layer, teacher layer) pairs."""
    if not table.mapping:
        raise ContractError("similarity table has no mapped layer pairs")
    return float(np.mean([table.score(t, s) for s, t in table.mapping.items()]))
