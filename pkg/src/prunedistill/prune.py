"""Global one-shot magnitude pruning over non-embedding parameters."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError
from .model import Model, is_embedding


@dataclass
class MaskSet:
    """Boolean keep-masks (True = kept) keyed by parameter name."""

    masks: dict[str, np.ndarray]
    target_sparsity: float

    @property
    def scope(self) -> list[str]:
        return sorted(self.masks)

    def n_weights(self) -> int:
        return sum(m.size for m in self.masks.values())

    def n_pruned(self) -> int:
        return sum(int(m.size - np.count_nonzero(m)) for m in self.masks.values())

    def achieved_sparsity(self) -> float:
        n = self.n_weights()
        return self.n_pruned() / n if n else 0.0

    def zero_set(self) -> set[tuple[str, int]]:
        return {(name, int(i)) for name, m in self.masks.items()
                for i in np.flatnonzero(~m.reshape(-1))}


def n_to_prune(sparsity: float, n: int) -> int:
    # the epsilon keeps e.g. 0.29 * 100 from flooring to 28
    return min(n, math.floor(sparsity * n + 1e-9))


def magnitude_mask(model: Model, sparsity: float) -> MaskSet:
    """Zero the ``floor(s * N)`` smallest-magnitude non-embedding weights.

    All non-embedding weights are pooled and stably sorted by ``|w|``; ties
    resolve by parameter name (lexicographic) then flat index.
    """
    if not 0.0 <= sparsity < 1.0:
        raise ContractError(f"sparsity must be in [0, 1), got {sparsity}")
    names = sorted(n for n in model.params if not is_embedding(n))
    flat = np.concatenate([np.abs(model.params[n].data).reshape(-1) for n in names])
    k = n_to_prune(sparsity, flat.size)
    keep = np.ones(flat.size, dtype=bool)
    keep[np.argsort(flat, kind="stable")[:k]] = False
    masks = {}
    offset = 0
    for n in names:
        shape = model.params[n].shape
        size = int(np.prod(shape))
        masks[n] = keep[offset:offset + size].reshape(shape).copy()
        offset += size
    return MaskSet(masks, sparsity)


def check_masks(model: Model, masks: MaskSet) -> None:
    bad = []
    for name, m in masks.masks.items():
        if name not in model.params:
            bad.append(f"{name} (no such parameter)")
        elif m.shape != model.params[name].shape:
            bad.append(f"{name} (mask {m.shape} vs param {model.params[name].shape})")
        elif is_embedding(name):
            bad.append(f"{name} (embedding parameters are never pruned)")
    if bad:
        raise ContractError("mask/parameter mismatch: " + ", ".join(bad))


def apply_masks(model: Model, masks: MaskSet) -> Model:
    """Set masked entries to exactly +0.0 in place; returns ``model``."""
    check_masks(model, masks)
    for name, m in masks.masks.items():
        p = model.params[name].data
        p[...] = np.where(m, p, 0.0)
    return model


def sparsity_report(model: Model, masks: MaskSet | None) -> list[dict]:
    """Per-tensor kept/pruned counts plus a final ``total`` row over the whole model."""
    masks = masks.masks if masks is not None else {}
    rows = []
    kept_total = size_total = 0
    for name, p in model.params.items():
        size = p.data.size
        kept = int(np.count_nonzero(masks[name])) if name in masks else size
        rows.append({"layer": name, "kept": kept, "pruned": size - kept, "density": kept / size})
        kept_total += kept
        size_total += size
    rows.append({"layer": "total", "kept": kept_total, "pruned": size_total - kept_total,
                 "density": kept_total / size_total})
    return rows


REPORT_HEADER = ("layer", "kept", "pruned", "density")


def report_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_HEADER, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "density": repr(float(r["density"]))})
    return buf.getvalue()


def read_report_csv(text: str) -> list[dict]:
    return [{"layer": r["layer"], "kept": int(r["kept"]), "pruned": int(r["pruned"]),
             "density": float(r["density"])} for r in csv.DictReader(io.StringIO(text))]
