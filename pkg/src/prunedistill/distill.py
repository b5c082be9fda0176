"""Teacher-to-student distillation, plain supervised training, and evaluation."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor, no_grad
from .metrics import field_f1, field_set, nted_accuracy, parse_token_sequence, text_tree
from .model import Model, forward, greedy_decode, pad_batch
from .prune import MaskSet, check_masks
from .tokenizer import Tokenizer


class SparsityViolation(AssertionError):
    pass


@dataclass
class DistillConfig:
    alpha: float = 0.5
    temperature: float = 2.0
    steps: int = 1000
    batch_size: int = 8
    lr: float = 2e-3
    warmup: int = 100
    eval_every: int = 250
    eval_samples: int | None = None
    check_every: int = 50
    seed: int = 0
    masks: MaskSet | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise ContractError(f"temperature must be > 0, got {self.temperature}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("alpha", "temperature", "steps", "batch_size", "lr",
                                              "warmup", "eval_every", "eval_samples",
                                              "check_every", "seed")}


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    sparsity_checks: list[tuple[int, int]] = field(default_factory=list)
    best_step: int | None = None
    best_val: float = -1.0
    best_state: dict | None = None

    HEADER = ("step", "train_loss", "val_nted", "wall_time_s")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        for r in self.rows:
            w.writerow([r["step"], repr(float(r["train_loss"])), repr(float(r["val_nted"])),
                        f"{r['wall_time_s']:.3f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        rows = [{"step": int(r["step"]), "train_loss": float(r["train_loss"]),
                 "val_nted": float(r["val_nted"]), "wall_time_s": float(r["wall_time_s"])}
                for r in csv.DictReader(io.StringIO(text))]
        return cls(rows=rows)


def distill_loss(student_logits: Tensor, teacher_logits, targets, alpha: float,
                 temperature: float, ignore_id: int = 0) -> Tensor:
    """``alpha * CE + (1 - alpha) * T^2 * KL(teacher_T || student_T)``.

    KL is summed over the vocabulary and averaged over non-ignored positions.
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    t_logits = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t_logits.shape != student_logits.shape:
        raise ContractError(f"teacher logits {t_logits.shape} vs student {student_logits.shape}")
    targets = np.asarray(targets)
    ce = ad.cross_entropy(student_logits, targets, ignore_id=ignore_id)
    if alpha == 1.0:
        return ce
    keep = (targets != ignore_id).astype(np.float64)
    count = keep.sum()
    if count == 0:
        return ce
    z = t_logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(log_p)
    log_q = ad.log_softmax(student_logits * (1.0 / temperature), axis=-1)
    kl_rows = ad.tsum(ad.mul(p, ad.add(log_p, ad.neg(log_q))), axis=-1)
    kl = ad.tsum(ad.mul(kl_rows, keep)) * (temperature**2 / count)
    if alpha == 0.0:
        return kl
    return ce * alpha + kl * (1.0 - alpha)


def make_batch(samples, bos_id: int, eos_id: int, pad_id: int):
    images = np.stack([s.image for s in samples])
    inputs, _ = pad_batch([[bos_id] + list(s.target_tokens) for s in samples], pad_id)
    targets, _ = pad_batch([list(s.target_tokens) + [eos_id] for s in samples], pad_id)
    return images, inputs, targets


def _check_sparsity(model: Model, masks: MaskSet, expected_nonzero: int | None) -> int:
    nonzero = 0
    for name, m in masks.masks.items():
        p = model.params[name].data
        pruned = p[~m]
        if np.any(pruned != 0.0) or np.any(np.signbit(pruned)):
            raise SparsityViolation(f"masked weights of {name} are not exactly +0.0")
        nonzero += int(np.count_nonzero(p))
    if expected_nonzero is not None and nonzero > expected_nonzero:
        raise SparsityViolation(f"nonzero count grew from {expected_nonzero} to {nonzero}")
    return nonzero


def train(student: Model, train_samples, cfg: DistillConfig, teacher: Model | None = None,
          val_samples=None, task: str = "reading", tokenizer: Tokenizer | None = None,
          log=None) -> tuple[Model, TrainHistory]:
    """Run ``cfg.steps`` Adam updates on ``student``.

    With a teacher the loss is :func:`distill_loss`; without one it is plain
    cross-entropy.  With ``cfg.masks`` the masked weights stay exactly zero;
    this is asserted every ``cfg.check_every`` steps.
    """
    tok = tokenizer or Tokenizer()
    if teacher is not None and teacher.config.vocab_size != student.config.vocab_size:
        raise ContractError(f"teacher vocab {teacher.config.vocab_size} != student vocab "
                            f"{student.config.vocab_size}")
    if student.config.vocab_size != tok.vocab_size:
        raise ContractError(f"model vocab {student.config.vocab_size} != tokenizer {tok.vocab_size}")
    masks = cfg.masks
    if masks is not None:
        check_masks(student, masks)
    hist = TrainHistory()
    if cfg.steps <= 0:
        return student, hist
    alpha = cfg.alpha if teacher is not None else 1.0
    opt = ad.Adam(student.params, lr=cfg.lr, warmup=cfg.warmup,
                  masks=masks.masks if masks is not None else None)
    rng = np.random.default_rng(cfg.seed)
    n = len(train_samples)
    bsz = min(cfg.batch_size, n)
    val = list(val_samples or [])
    if cfg.eval_samples is not None:
        val = val[: cfg.eval_samples]
    start = time.perf_counter()
    baseline_nonzero = None
    if masks is not None:
        baseline_nonzero = _check_sparsity(student, masks, None)
        hist.sparsity_checks.append((0, baseline_nonzero))

    def record(step, window):
        acc = evaluate(student, val, task, tok)["nted"] if val else float("nan")
        hist.rows.append({"step": step, "train_loss": float(np.mean(window)) if window else float("nan"),
                          "val_nted": acc, "wall_time_s": time.perf_counter() - start})
        if val and acc > hist.best_val:
            hist.best_val, hist.best_step, hist.best_state = acc, step, student.state_dict()
        if log:
            log(f"step {step} loss {hist.rows[-1]['train_loss']:.4f} val_nted {acc:.4f}")

    if cfg.eval_every:
        record(0, [])
    window: list[float] = []
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(n, size=bsz, replace=False)
        images, inputs, targets = make_batch([train_samples[i] for i in idx],
                                             tok.bos_id, tok.eos_id, tok.pad_id)
        logits = forward(student, images, inputs)
        if teacher is not None and alpha < 1.0:
            with no_grad():
                t_logits = forward(teacher, images, inputs)
            loss = distill_loss(logits, t_logits, targets, alpha, cfg.temperature, tok.pad_id)
        else:
            loss = ad.cross_entropy(logits, targets, ignore_id=tok.pad_id)
        opt.zero_grad()
        loss.backward()
        opt.step()
        hist.losses.append(loss.item())
        window.append(loss.item())
        if masks is not None and (step % cfg.check_every == 0 or step == cfg.steps):
            hist.sparsity_checks.append((step, _check_sparsity(student, masks, baseline_nonzero)))
        if cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.steps):
            record(step, window)
            window = []
    opt.zero_grad()
    return student, hist


def predict_tree(tokens: list[str], task: str):
    return text_tree(tokens) if task == "reading" else parse_token_sequence(tokens)


def gold_tree(sample, task: str):
    return text_tree(list(sample.text)) if task == "reading" else sample.tree


def evaluate(model: Model, samples, task: str = "reading", tokenizer: Tokenizer | None = None,
             batch_size: int = 64) -> dict:
    """Greedy-decode every sample and score it.

    Returns mean N-TED accuracy, mean field F1 (KIE only, else None) and one
    row per sample.
    """
    tok = tokenizer or Tokenizer()
    rows = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        outs = greedy_decode(model, np.stack([s.image for s in chunk]),
                             bos_id=tok.bos_id, eos_id=tok.eos_id)
        for k, (s, ids) in enumerate(zip(chunk, outs)):
            pred = predict_tree(tok.decode(ids), task)
            gold = gold_tree(s, task)
            row = {"sample_id": lo + k, "nted": nted_accuracy(pred, gold), "f1": None}
            if task == "kie":
                row["f1"] = field_f1(field_set(pred), field_set(gold))["f1"]
            rows.append(row)
    nted = float(np.mean([r["nted"] for r in rows])) if rows else float("nan")
    f1 = float(np.mean([r["f1"] for r in rows])) if rows and task == "kie" else None
    return {"nted": nted, "f1": f1, "rows": rows}
