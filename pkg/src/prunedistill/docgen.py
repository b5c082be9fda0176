"""Deterministic toy document generators.

Two tasks share one renderer: *reading* (random lines of text, target is the
text itself) and *KIE* (``KEY:VALUE`` lines, target is the serialized field
tree).  Every sample is a pure function of its seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import font
from .metrics import FieldTree, kie_tree, serialize_tree
from .tokenizer import FIELD_KEYS, NEWLINE, Tokenizer

CELL_H = 8
CELL_W = 8
N_BACKGROUNDS = 4

READING_CHARS = tuple(c for c in font.GLYPHS if c.isalnum())
LETTERS = tuple(c for c in font.GLYPHS if c.isalpha())
DIGITS = tuple(c for c in font.GLYPHS if c.isdigit())


@dataclass
class GenConfig:
    image_h: int = 40
    image_w: int = 96
    glyphs: tuple = READING_CHARS
    lines: tuple = (1, 3)
    chars_per_line: tuple = (2, 8)
    fields: tuple = (2, 5)
    value_len: tuple = (1, 5)
    noise: float = 0.1
    background: int | None = None
    max_x_offset: int = 0
    splits: dict = field(default_factory=lambda: {"train": 2000, "val": 200, "test": 200})
    seed: int = 0

    def validate(self, tokenizer: Tokenizer | None = None) -> None:
        if any(n <= 0 for n in self.splits.values()):
            raise ValueError(f"split sizes must be positive: {self.splits}")
        if self.image_h < CELL_H or self.image_w < CELL_W:
            raise ValueError("image smaller than one glyph cell")
        if self.background is not None and not 0 <= self.background < N_BACKGROUNDS:
            raise ValueError(f"background style must be in [0, {N_BACKGROUNDS})")
        if tokenizer is not None:
            missing = [g for g in self.glyphs if g not in tokenizer.index]
            if missing:
                raise ValueError(f"glyphs not in tokenizer vocabulary: {missing}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["glyphs"] = "".join(self.glyphs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        for k in ("lines", "chars_per_line", "fields", "value_len"):
            if k in d:
                d[k] = tuple(d[k])
        if "glyphs" in d:
            d["glyphs"] = tuple(d["glyphs"])
        return cls(**d)


@dataclass
class DocSample:
    image: np.ndarray
    text: str
    target_tokens: list[int]
    seed: int
    tree: FieldTree | None = None
    task: str = "reading"


def render_glyph(ch: str, cell=None) -> np.ndarray:
    """Dot-matrix bitmap for ``ch`` scaled (nearest, integer factor) into ``cell``."""
    h, w = cell or (CELL_H, CELL_W)
    bm = font.bitmap(ch)
    s = max(1, min(h // font.GLYPH_H, w // font.GLYPH_W))
    big = np.kron(bm, np.ones((s, s)))[:h, :w]
    out = np.zeros((h, w))
    out[: big.shape[0], : big.shape[1]] = big
    return out


def sample_seed(master: int, split: str, index: int) -> int:
    h = hashlib.blake2b(f"{master}:{split}:{index}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def _background(rng: np.random.Generator, style: int, h: int, w: int) -> np.ndarray:
    if style == 0:
        return np.zeros((h, w))
    if style == 1:
        period = int(rng.integers(3, 7))
        rows = (np.arange(h) % period == 0).astype(float)
        return 0.25 * np.repeat(rows[:, None], w, axis=1)
    if style == 2:
        period = int(rng.integers(4, 9))
        cols = (np.arange(w) % period == 0).astype(float)
        return 0.25 * np.repeat(cols[None, :], h, axis=0)
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.zeros((h, w))
    for _ in range(3):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(3, 8)
        out += 0.3 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    return np.minimum(out, 0.3)


def render_lines(lines, cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Place ``lines`` top to bottom, one glyph cell per character."""
    h, w = cfg.image_h, cfg.image_w
    style = int(rng.integers(N_BACKGROUNDS)) if cfg.background is None else cfg.background
    img = _background(rng, style, h, w)
    widest = max((len(l) for l in lines), default=0)
    slack = max(0, w - widest * CELL_W)
    x0 = int(rng.integers(0, min(cfg.max_x_offset, slack) + 1))
    for row, line in enumerate(lines):
        y = row * CELL_H
        for col, ch in enumerate(line):
            x = x0 + col * CELL_W
            np.maximum(img[y:y + CELL_H, x:x + CELL_W], render_glyph(ch),
                       out=img[y:y + CELL_H, x:x + CELL_W])
    if cfg.noise > 0:
        img = img + rng.uniform(-cfg.noise, cfg.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _fit(lines: list[str], cfg: GenConfig) -> list[str]:
    rows = cfg.image_h // CELL_H
    cols = cfg.image_w // CELL_W
    return [l[:cols] for l in lines[:rows]]


def gen_reading_sample(cfg: GenConfig, seed: int, tokenizer: Tokenizer | None = None) -> DocSample:
    tok = tokenizer or Tokenizer()
    rng = np.random.default_rng(seed)
    n_lines = int(rng.integers(cfg.lines[0], cfg.lines[1] + 1))
    lines = []
    for _ in range(n_lines):
        n = int(rng.integers(cfg.chars_per_line[0], cfg.chars_per_line[1] + 1))
        lines.append("".join(rng.choice(list(cfg.glyphs), size=n)))
    lines = _fit(lines, cfg)
    image = render_lines(lines, cfg, rng)
    text = NEWLINE.join(lines)
    return DocSample(image, text, tok.encode_text(text), seed, None, "reading")


def _field_value(key: str, rng: np.random.Generator, lo: int, hi: int) -> str:
    n = int(rng.integers(lo, hi + 1))
    if key == "date":
        d, m = int(rng.integers(1, 29)), int(rng.integers(1, 13))
        return f"{d:02d}/{m:02d}"[:max(n, 2)]
    if key in ("value", "total", "weight"):
        digits = "".join(rng.choice(list(DIGITS), size=n))
        if n >= 3 and rng.random() < 0.5:
            digits = digits[:-2] + "." + digits[-2:]
        return digits
    return "".join(rng.choice(list(LETTERS), size=n))


def gen_kie_sample(cfg: GenConfig, seed: int, tokenizer: Tokenizer | None = None) -> DocSample:
    tok = tokenizer or Tokenizer()
    rng = np.random.default_rng(seed)
    rows = cfg.image_h // CELL_H
    cols = cfg.image_w // CELL_W
    # only keys whose "KEY:" prefix leaves room for one value character
    fitting = [k for k in tok.field_keys if len(k) + 2 <= cols]
    if not fitting:
        raise ValueError(f"image width {cfg.image_w} too narrow for any KIE field")
    hi = min(cfg.fields[1], len(fitting), rows)
    n = int(rng.integers(min(cfg.fields[0], hi), hi + 1))
    keys = sorted(rng.choice(len(fitting), size=n, replace=False))
    fields = []
    for k in keys:
        key = fitting[k]
        room = cols - len(key) - 1
        value = _field_value(key, rng, cfg.value_len[0], cfg.value_len[1])[:max(room, 1)]
        fields.append((key, value))
    lines = [f"{k.upper()}:{v}" for k, v in fields]
    image = render_lines(lines, cfg, rng)
    tree = kie_tree(fields)
    target = tok.encode_tokens(serialize_tree(tree, tok.field_keys))
    return DocSample(image, "\n".join(lines), target, seed, tree, "kie")


GENERATORS = {"reading": gen_reading_sample, "kie": gen_kie_sample}


def gen_split(cfg: GenConfig, task: str = "reading", tokenizer: Tokenizer | None = None,
              splits=None) -> dict[str, list[DocSample]]:
    """Samples for each split, seeded by ``hash(master_seed, split, index)``."""
    cfg.validate(tokenizer)
    gen = GENERATORS[task]
    tok = tokenizer or Tokenizer()
    out = {}
    for split, size in cfg.splits.items():
        if splits is not None and split not in splits:
            continue
        out[split] = [gen(cfg, sample_seed(cfg.seed, f"{task}/{split}", i), tok)
                      for i in range(size)]
    return out


def write_manifest(path: Path, samples, split: str) -> None:
    """One JSON object per line: seed, split, task, text."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for i, s in enumerate(samples):
            rec = {"index": i, "seed": s.seed, "split": split, "task": s.task, "text": s.text}
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path: Path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Binary PGM (P5), 8-bit."""
    h, w = image.shape
    data = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    with Path(path).open("wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())
