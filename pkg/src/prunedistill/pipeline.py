"""Experiment matrix: data generation, five model variants, evaluation, CKA, reports.

Every command reads one JSON config and writes under a single output
directory.  Variant dependencies::

    teacher ─┬─> pruned ──> hole
             └─> small-distilled
    small (independent)

Each trained variant has an upstream (reading) phase followed by a
downstream (KIE) fine-tuning phase.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .autodiff import ContractError
from .cka import layerwise_table, global_index
from .distill import DistillConfig, TrainHistory, evaluate, train
from .docgen import GenConfig, gen_split, write_manifest
from .model import Model, ModelConfig, capture_activations, count_params
from .prune import magnitude_mask, apply_masks, report_csv, sparsity_report
from .tokenizer import Tokenizer

VARIANTS = ("teacher", "small", "small-distilled", "pruned", "hole")
TASKS = ("reading", "kie")
SPLITS = ("train", "val", "test")
PHASE_OF_TASK = {"reading": "upstream", "kie": "kie"}
ARCH = {"teacher": "teacher", "small": "small", "small-distilled": "small",
        "pruned": "teacher", "hole": "teacher"}
PREREQS = {"teacher": (), "small": (), "small-distilled": ("teacher",),
           "pruned": ("teacher",), "hole": ("teacher", "pruned")}

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "sparsity": 0.5,
    "data": {
        "reading": {"splits": {"train": 2000, "val": 200, "test": 200}},
        "kie": {"splits": {"train": 400, "val": 50, "test": 50}},
    },
    "models": {
        "teacher": {"d_enc": 16, "d_dec": 16, "n_enc_layers": 2, "n_dec_layers": 2,
                    "n_heads": 4, "d_ff": 64},
        "small": {"d_enc": 16, "d_dec": 12, "n_enc_layers": 2, "n_dec_layers": 1,
                  "n_heads": 2, "d_ff": 32, "adapter_bottleneck": 16},
    },
    "train": {
        "teacher": {"steps": 4000, "eval_every": 500},
        "small": {"steps": 8000, "eval_every": 500},
        "small-distilled": {"steps": 8000, "eval_every": 500},
        "hole": {"steps": 1000, "eval_every": 250},
        "kie": {"steps": 1000, "lr": 1e-3, "warmup": 20, "eval_every": 250},
    },
    "probe": {"size": 64, "split": "val"},
}


class PrerequisiteMissing(ContractError):
    pass


class RunLocked(OSError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def sub_seed(master: int, name: str) -> int:
    """Independent 32-bit seed for a named stage of the run."""
    h = hashlib.blake2b(f"{master}/{name}".encode(), digest_size=4)
    return int.from_bytes(h.digest(), "little")


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def load(cls, path=None, seed: int | None = None, overrides: dict | None = None):
        raw = copy.deepcopy(DEFAULT_CONFIG)
        if path is not None:
            try:
                user = json.loads(Path(path).read_text(encoding="utf-8"))
            except json.JSONDecodeError as e:
                raise ContractError(f"config {path} is not valid JSON: {e}") from e
            raw = _merge(raw, user)
        if overrides:
            raw = _merge(raw, overrides)
        if seed is not None:
            raw["seed"] = int(seed)
        cfg = cls(raw)
        cfg.validate()
        return cfg

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def sparsity(self) -> float:
        return float(self.raw["sparsity"])

    def tokenizer(self) -> Tokenizer:
        return Tokenizer()

    def gen_config(self, task: str) -> GenConfig:
        d = dict(self.raw["data"][task])
        d["seed"] = self.seed
        return GenConfig.from_dict(d)

    def model_config(self, arch: str) -> ModelConfig:
        g = self.gen_config("reading")
        return ModelConfig(image_h=g.image_h, image_w=g.image_w,
                           vocab_size=self.tokenizer().vocab_size, **self.raw["models"][arch])

    def distill_config(self, phase: str, masks=None) -> DistillConfig:
        d = dict(self.raw["train"][phase])
        d.setdefault("seed", sub_seed(self.seed, f"train/{phase}"))
        return DistillConfig(masks=masks, **d)

    def validate(self) -> None:
        if not 0.0 <= self.sparsity < 1.0:
            raise ContractError(f"sparsity must be in [0, 1), got {self.sparsity}")
        g = {t: self.gen_config(t) for t in TASKS}
        if (g["reading"].image_h, g["reading"].image_w) != (g["kie"].image_h, g["kie"].image_w):
            raise ContractError("reading and KIE images must share one size")
        tok = self.tokenizer()
        for t in TASKS:
            try:
                g[t].validate(tok)
            except ValueError as e:
                raise ContractError(f"data.{t}: {e}") from e
        for arch in ("teacher", "small"):
            self.model_config(arch)
        for phase in self.raw["train"]:
            self.distill_config(phase)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# output layout


class Layout:
    """Stable relative paths under ``--out``."""

    def __init__(self, root):
        self.root = Path(root)

    def manifest(self, task: str, split: str) -> Path:
        return self.root / "data" / task / f"{split}.jsonl"

    def run_dir(self, variant: str) -> Path:
        return self.root / "runs" / variant

    def ckpt(self, variant: str, phase: str, best: bool = False) -> Path:
        return self.run_dir(variant) / f"{phase}{'_best' if best else ''}.ckpt"

    def history(self, variant: str, phase: str) -> Path:
        return self.run_dir(variant) / f"{phase}_history.csv"

    def sparsity(self, variant: str) -> Path:
        return self.run_dir(variant) / "sparsity.csv"

    def sparsity_checks(self, variant: str, phase: str) -> Path:
        return self.run_dir(variant) / f"{phase}_sparsity_checks.csv"

    def eval_csv(self, variant: str, task: str, split: str) -> Path:
        return self.root / "eval" / f"{variant}_{task}_{split}.csv"

    def cka_csv(self, a: str, b: str) -> Path:
        return self.root / "cka" / f"{a}_vs_{b}.csv"

    def cka_mapping(self, a: str, b: str) -> Path:
        return self.root / "cka" / f"{a}_vs_{b}_mapping.csv"

    def cka_index(self, a: str, b: str) -> Path:
        return self.root / "cka" / f"{a}_vs_{b}_global.txt"

    @property
    def ledger(self) -> Path:
        return self.root / "ledger.csv"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def config(self) -> Path:
        return self.root / "config.json"


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        f.write(text)


@contextmanager
def run_lock(directory: Path):
    """Exclusive ownership of a run directory for the duration of a command."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(f"{directory} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# ledger


LEDGER_HEADER = ("kind", "variant", "task", "split", "metric", "value", "artifact", "wall_time_s")


def append_ledger(layout: Layout, rows: list[dict]) -> None:
    path = layout.ledger
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with path.open("a", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LEDGER_HEADER, lineterminator="\n")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in LEDGER_HEADER})


def read_ledger(layout: Layout) -> list[dict]:
    if not layout.ledger.exists():
        return []
    with layout.ledger.open(encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def latest(rows: list[dict]) -> dict[tuple, dict]:
    """Last row per (kind, variant, task, split, metric); earlier rows stay untouched."""
    out = {}
    for r in rows:
        out[(r["kind"], r["variant"], r["task"], r["split"], r["metric"])] = r
    return out


# ---------------------------------------------------------------------------
# commands


def _config_in_out(cfg: ExperimentConfig, layout: Layout) -> None:
    if layout.config.exists() and layout.config.read_text(encoding="utf-8") != cfg.to_json():
        raise ContractError(f"{layout.root} was produced with a different config; "
                            "use a fresh --out directory")
    _write_text(layout.config, cfg.to_json())


def cmd_gen_data(cfg: ExperimentConfig, out) -> list[Path]:
    layout = Layout(out)
    _config_in_out(cfg, layout)
    tok = cfg.tokenizer()
    written = []
    for task in TASKS:
        data = gen_split(cfg.gen_config(task), task, tok)
        for split in SPLITS:
            if split in data:
                path = layout.manifest(task, split)
                write_manifest(path, data[split], split)
                written.append(path)
    return written


def _load_data(cfg: ExperimentConfig, layout: Layout, task: str) -> dict:
    for split in SPLITS:
        if not layout.manifest(task, split).exists():
            raise PrerequisiteMissing(f"dataset manifests missing under {layout.root / 'data'}; "
                                      "run `prunedistill gen-data` first")
    return gen_split(cfg.gen_config(task), task, cfg.tokenizer())


def _require(layout: Layout, variant: str, phase: str = "upstream") -> Path:
    path = layout.ckpt(variant, phase)
    if not path.exists():
        raise PrerequisiteMissing(f"{variant} checkpoint not found at {path}; "
                                  f"run `prunedistill train {variant}` first")
    return path


def _train_phase(layout, variant, phase, student, samples, dcfg, teacher, val, task, tok, masks):
    start = time.perf_counter()
    student, hist = train(student, samples, dcfg, teacher=teacher, val_samples=val,
                          task=task, tokenizer=tok)
    wall = time.perf_counter() - start
    checkpoint.save(layout.ckpt(variant, phase), student, masks)
    if hist.best_state is not None:
        best = Model(student.config, student.variant, params=hist.best_state)
        checkpoint.save(layout.ckpt(variant, phase, best=True), best, masks,
                        extra={"step": hist.best_step})
    _write_text(layout.history(variant, phase), hist.to_csv())
    if masks is not None:
        _write_text(layout.sparsity_checks(variant, phase), sparsity_checks_csv(hist.sparsity_checks))
    return student, hist, wall


def sparsity_checks_csv(checks) -> str:
    return "step,nonzero\n" + "".join(f"{step},{n}\n" for step, n in checks)


def read_sparsity_checks(text: str) -> list[tuple[int, int]]:
    return [(int(r["step"]), int(r["nonzero"])) for r in csv.DictReader(io.StringIO(text))]


def cmd_train(cfg: ExperimentConfig, out, variant: str) -> dict:
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    layout = Layout(out)
    for dep in PREREQS[variant]:
        _require(layout, dep, "upstream")
        _require(layout, dep, "kie")
    _config_in_out(cfg, layout)
    tok = cfg.tokenizer()
    reading = _load_data(cfg, layout, "reading")
    kie = _load_data(cfg, layout, "kie")
    ledger_rows = []
    with run_lock(layout.run_dir(variant)):
        if variant == "pruned":
            start = time.perf_counter()
            for phase in ("upstream", "kie"):
                teacher, _, _ = checkpoint.load(layout.ckpt("teacher", phase))
                pruned = teacher.copy("pruned")
                masks = magnitude_mask(pruned, cfg.sparsity)
                apply_masks(pruned, masks)
                checkpoint.save(layout.ckpt(variant, phase), pruned, masks)
                if phase == "upstream":
                    _write_text(layout.sparsity(variant), report_csv(sparsity_report(pruned, masks)))
            ledger_rows.append({"kind": "train", "variant": variant, "metric": "wall_time_s",
                                "artifact": str(layout.ckpt(variant, "kie").relative_to(layout.root)),
                                "wall_time_s": f"{time.perf_counter() - start:.3f}"})
        else:
            teacher = masks = None
            arch = ARCH[variant]
            if variant == "hole":
                student, masks, _ = checkpoint.load(layout.ckpt("pruned", "upstream"))
                student.variant = "pruned"
            else:
                student = Model(cfg.model_config(arch), "teacher" if arch == "teacher" else "small",
                                seed=sub_seed(cfg.seed, f"init/{variant}"))
            if variant in ("small-distilled", "hole"):
                teacher, _, _ = checkpoint.load(layout.ckpt("teacher", "upstream"))
            phase_cfg = variant
            student, _, wall_up = _train_phase(
                layout, variant, "upstream", student, reading["train"],
                cfg.distill_config(phase_cfg, masks), teacher, reading["val"], "reading", tok, masks)
            student, _, wall_kie = _train_phase(
                layout, variant, "kie", student, kie["train"],
                cfg.distill_config("kie", masks), None, kie["val"], "kie", tok, masks)
            if masks is not None:
                _write_text(layout.sparsity(variant), report_csv(sparsity_report(student, masks)))
            for phase, wall in (("upstream", wall_up), ("kie", wall_kie)):
                ledger_rows.append({"kind": "train", "variant": variant, "task": phase,
                                    "metric": "wall_time_s",
                                    "artifact": str(layout.ckpt(variant, phase).relative_to(layout.root)),
                                    "wall_time_s": f"{wall:.3f}"})
    append_ledger(layout, ledger_rows)
    return {"variant": variant, "checkpoints": [str(layout.ckpt(variant, p)) for p in ("upstream", "kie")]}


EVAL_HEADER = {"reading": ("sample_id", "nted_pred_vs_gold"),
               "kie": ("sample_id", "nted_pred_vs_gold", "f1")}
_ROW_KEY = {"nted_pred_vs_gold": "nted", "f1": "f1"}


def eval_csv(rows: list[dict], task: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = EVAL_HEADER[task]
    w.writerow(header)
    for r in rows:
        w.writerow([r["sample_id"]] + [repr(float(r[_ROW_KEY[k]])) for k in header[1:]])
    return buf.getvalue()


def read_eval_csv(text: str) -> list[dict]:
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        row = {"sample_id": int(r["sample_id"]), "nted": float(r["nted_pred_vs_gold"])}
        if "f1" in r:
            row["f1"] = float(r["f1"])
        out.append(row)
    return out


def cmd_evaluate(cfg: ExperimentConfig, out, variant: str, task: str, split: str) -> dict:
    if variant not in VARIANTS or task not in TASKS or split not in SPLITS:
        raise ContractError(f"expected variant in {VARIANTS}, task in {TASKS}, split in {SPLITS}")
    layout = Layout(out)
    path = _require(layout, variant, PHASE_OF_TASK[task])
    model, _, _ = checkpoint.load(path)
    samples = _load_data(cfg, layout, task)[split]
    start = time.perf_counter()
    res = evaluate(model, samples, task, cfg.tokenizer())
    wall = time.perf_counter() - start
    _write_text(layout.eval_csv(variant, task, split), eval_csv(res["rows"], task))
    artifact = str(layout.eval_csv(variant, task, split).relative_to(layout.root))
    rows = [{"kind": "eval", "variant": variant, "task": task, "split": split, "metric": "nted",
             "value": repr(res["nted"]), "artifact": artifact, "wall_time_s": f"{wall:.3f}"}]
    if task == "kie":
        rows.append({"kind": "eval", "variant": variant, "task": task, "split": split,
                     "metric": "f1", "value": repr(res["f1"]), "artifact": artifact,
                     "wall_time_s": f"{wall:.3f}"})
    append_ledger(layout, rows)
    return {"nted": res["nted"], "f1": res["f1"], "n": len(res["rows"])}


def probe_batch(cfg: ExperimentConfig, layout: Layout):
    p = cfg.raw["probe"]
    samples = _load_data(cfg, layout, "reading")[p["split"]][: int(p["size"])]
    return np.stack([s.image for s in samples]), [s.target_tokens for s in samples]


def cmd_cka(cfg: ExperimentConfig, out, a: str, b: str) -> dict:
    if a not in VARIANTS or b not in VARIANTS:
        raise ContractError(f"variants must be in {VARIANTS}")
    layout = Layout(out)
    ma, _, _ = checkpoint.load(_require(layout, a))
    mb, _, _ = checkpoint.load(_require(layout, b))
    if (ma.config.image_h, ma.config.image_w) != (mb.config.image_h, mb.config.image_w):
        raise ContractError("the two models expect different image sizes")
    images, tokens = probe_batch(cfg, layout)
    if images.shape[1:] != (ma.config.image_h, ma.config.image_w):
        raise ContractError(f"probe images {images.shape[1:]} do not fit the models")
    start = time.perf_counter()
    table = layerwise_table(capture_activations(ma, images, tokens),
                            capture_activations(mb, images, tokens))
    g = global_index(table)
    _write_text(layout.cka_csv(a, b), table.to_csv())
    _write_text(layout.cka_mapping(a, b), table.mapping_csv())
    _write_text(layout.cka_index(a, b), repr(g) + "\n")
    append_ledger(layout, [{"kind": "cka", "variant": b, "task": a, "metric": "global_index",
                            "value": repr(g),
                            "artifact": str(layout.cka_csv(a, b).relative_to(layout.root)),
                            "wall_time_s": f"{time.perf_counter() - start:.3f}"}])
    return {"global_index": g, "shape": table.scores.shape}


# ---------------------------------------------------------------------------
# reports


def density_headline(teacher_counts: dict, pruned_counts: dict) -> float:
    """Fraction of the teacher's weights removed: ``1 - nonzero_total(pruned) / total(teacher)``."""
    return 1.0 - pruned_counts["nonzero_total"] / teacher_counts["total"]


def reduction_formula(embedding_fraction: float, sparsity: float) -> float:
    """Expected headline when only non-embedding weights are pruned at ``sparsity``."""
    return (1 - embedding_fraction) * sparsity


def _table(header, rows) -> tuple[str, str]:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    md += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return buf.getvalue(), "\n".join(md) + "\n"


def _fmt(x) -> str:
    return "" if x is None else f"{float(x):.4f}"


def cmd_report(cfg: ExperimentConfig, out, variants=VARIANTS) -> dict:
    layout = Layout(out)
    entries = latest(read_ledger(layout))
    missing = [f"train {v}" for v in variants if not layout.ckpt(v, "upstream").exists()]
    need_eval = [(v, t) for v in variants for t in TASKS
                 if ("eval", v, t, "test", "nted") not in entries]
    missing += [f"evaluate {v} {t} test" for v, t in need_eval]
    if missing:
        raise PrerequisiteMissing("ledger incomplete; missing runs: " + ", ".join(missing))

    counts = {v: count_params(checkpoint.load(layout.ckpt(v, "upstream"))[0]) for v in variants}
    t1_rows = []
    for v in variants:
        c = counts[v]
        t1_rows.append([v, c["non_embedding"], c["nonzero_non_embedding"], c["embedding"],
                        c["total"], c["nonzero_total"], repr(c["nonzero_total"] / c["total"])])
    t1 = _table(("variant", "non_embedding", "nonzero_non_embedding", "embedding", "total",
                 "nonzero_total", "density"), t1_rows)

    def metric(v, t, m):
        r = entries.get(("eval", v, t, "test", m))
        return float(r["value"]) if r else None

    t2 = _table(("variant", "nonzero_non_embedding", "nted"),
                [[v, counts[v]["nonzero_non_embedding"], _fmt(metric(v, "reading", "nted"))]
                 for v in variants])
    t3 = _table(("variant", "nonzero_non_embedding", "nted", "f1"),
                [[v, counts[v]["nonzero_non_embedding"], _fmt(metric(v, "kie", "nted")),
                  _fmt(metric(v, "kie", "f1"))] for v in variants])
    cka_rows = []
    for v in variants:
        r = entries.get(("cka", v, "teacher", "", "global_index"))
        if r is not None:
            cka_rows.append([v, _fmt(r["value"])])
    t5 = _table(("variant", "cka_global_index_vs_teacher"), cka_rows)

    outputs = {"table1_config": t1, "table2_reading": t2, "table3_kie": t3, "table5_cka": t5}
    for name, (csv_text, md_text) in outputs.items():
        _write_text(layout.reports / f"{name}.csv", csv_text)
        _write_text(layout.reports / f"{name}.md", md_text)
    result = {"tables": sorted(outputs)}
    if "teacher" in counts and "pruned" in counts:
        h = density_headline(counts["teacher"], counts["pruned"])
        _write_text(layout.reports / "headline.txt", f"density_reduction {h!r}\n")
        result["density_reduction"] = h
    return result


def run_all(cfg: ExperimentConfig, out, log=print) -> dict:
    """``gen-data``, train all variants, evaluate every variant on both test splits, CKA, report."""
    cmd_gen_data(cfg, out)
    for v in VARIANTS:
        log(f"train {v}")
        cmd_train(cfg, out, v)
    results = {}
    for v in VARIANTS:
        for t in TASKS:
            results[(v, t)] = cmd_evaluate(cfg, out, v, t, "test")
            log(f"evaluate {v} {t}: {results[(v, t)]}")
    for v in VARIANTS:
        results[("cka", v)] = cmd_cka(cfg, out, "teacher", v)["global_index"]
    cmd_report(cfg, out)
    return results
