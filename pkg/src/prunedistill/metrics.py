"""Field trees, their token serialization, tree edit distance, N-TED and field F1."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .tokenizer import BOS, EOS, PAD

ROOT = "root"
ORPHAN = "_orphan"


@dataclass
class FieldTree:
    """Rooted ordered labeled tree.

    Children of the root are fields; inside a field a childless node is a
    value whose label is the value text, any other node is a nested field.
    """

    label: str = ROOT
    children: list["FieldTree"] = field(default_factory=list)

    def add(self, child: "FieldTree") -> "FieldTree":
        self.children.append(child)
        return self

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children)

    def __len__(self) -> int:
        return self.size()

    def postorder(self):
        for c in self.children:
            yield from c.postorder()
        yield self

    def to_obj(self):
        return [self.label, [c.to_obj() for c in self.children]]

    @classmethod
    def from_obj(cls, obj) -> "FieldTree":
        label, kids = obj
        return cls(label, [cls.from_obj(k) for k in kids])

    def __repr__(self) -> str:
        if not self.children:
            return repr(self.label)
        return f"{self.label}({', '.join(repr(c) for c in self.children)})"


def kie_tree(fields) -> FieldTree:
    """Tree for an ordered sequence of ``(key, value)`` pairs."""
    root = FieldTree()
    for key, value in fields:
        node = FieldTree(key)
        if value:
            node.add(FieldTree(value))
        root.add(node)
    return root


def text_tree(text: str) -> FieldTree:
    """Reading-task tree: one leaf per character under the root.

    Tree edit distance between two such trees is the character edit distance.
    """
    return FieldTree(ROOT, [FieldTree(ch) for ch in text])


# ---------------------------------------------------------------------------
# serialization


def _is_open(tok: str) -> bool:
    return tok.startswith("<s_") and tok.endswith(">")


def _is_close(tok: str) -> bool:
    return tok.startswith("</s_") and tok.endswith(">")


def serialize_tree(tree: FieldTree, field_keys=None) -> list[str]:
    """Depth-first ``<s_k> ... </s_k>`` token list; the root is implicit."""
    out: list[str] = []

    def emit_field(node: FieldTree):
        if field_keys is not None and node.label not in field_keys:
            raise KeyError(f"unknown field label {node.label!r}")
        out.append(f"<s_{node.label}>")
        for c in node.children:
            if c.children:
                emit_field(c)
            else:
                out.extend(c.label)
        out.append(f"</s_{node.label}>")

    for child in tree.children:
        emit_field(child)
    return out


def parse_token_sequence(tokens) -> FieldTree:
    """Parse model output into a tree, repairing malformed input.

    Unmatched close tags are dropped, unclosed fields are closed at the end,
    and text outside every field is attached under an ``_orphan`` field.
    Never raises.
    """
    root = FieldTree()
    stack = [root]
    buf: list[str] = []

    def flush():
        if not buf:
            return
        text = "".join(buf)
        buf.clear()
        parent = stack[-1]
        if parent is root:
            parent = FieldTree(ORPHAN)
            root.add(parent)
        parent.add(FieldTree(text))

    for tok in tokens:
        tok = str(tok)
        if tok == EOS:
            break
        if tok in (BOS, PAD):
            continue
        if _is_close(tok):
            flush()
            label = tok[4:-1]
            for depth in range(len(stack) - 1, 0, -1):
                if stack[depth].label == label:
                    del stack[depth:]
                    break
        elif _is_open(tok):
            flush()
            node = FieldTree(tok[3:-1])
            stack[-1].add(node)
            stack.append(node)
        else:
            buf.append(tok)
    flush()
    return root


# ---------------------------------------------------------------------------
# tree edit distance


def _annotate(tree: FieldTree):
    labels: list[str] = []
    lml: list[int] = []

    def walk(node) -> int:
        first = None
        for c in node.children:
            leftmost = walk(c)
            if first is None:
                first = leftmost
        idx = len(labels)
        labels.append(node.label)
        lml.append(idx if first is None else first)
        return lml[idx]

    walk(tree)
    seen: dict[int, int] = {}
    for i, l in enumerate(lml):
        seen[l] = i
    keyroots = sorted(seen.values())
    return labels, lml, keyroots


def _zhang_shasha(a_lml, a_kr, b_lml, b_kr, relabel, minimum):
    """Zhang-Shasha DP over postorder-indexed trees.

    ``relabel(i, j)`` is the cost of mapping node i onto node j.  The same
    body runs on Python ints (``minimum=min``) or on arrays holding many
    label assignments at once (``minimum`` = elementwise 3-way min).
    """
    n, m = len(a_lml), len(b_lml)
    td = [[0] * m for _ in range(n)]
    for i in a_kr:
        for j in b_kr:
            li, lj = a_lml[i], b_lml[j]
            rows, cols = i - li + 2, j - lj + 2
            fd = [[0] * cols for _ in range(rows)]
            for x in range(1, rows):
                fd[x][0] = x
            for y in range(1, cols):
                fd[0][y] = y
            for x in range(1, rows):
                ax = li + x - 1
                for y in range(1, cols):
                    by = lj + y - 1
                    if a_lml[ax] == li and b_lml[by] == lj:
                        v = minimum(fd[x - 1][y] + 1, fd[x][y - 1] + 1,
                                    fd[x - 1][y - 1] + relabel(ax, by))
                        fd[x][y] = v
                        td[ax][by] = v
                    else:
                        p = a_lml[ax] - li
                        q = b_lml[by] - lj
                        fd[x][y] = minimum(fd[x - 1][y] + 1, fd[x][y - 1] + 1,
                                           fd[p][q] + td[ax][by])
    return td[n - 1][m - 1]


def tree_edit_distance(t1: FieldTree, t2: FieldTree) -> int:
    """Unit-cost ordered tree edit distance (Zhang-Shasha)."""
    a_lab, a_lml, a_kr = _annotate(t1)
    b_lab, b_lml, b_kr = _annotate(t2)
    return _zhang_shasha(a_lml, a_kr, b_lml, b_kr,
                         lambda i, j: 0 if a_lab[i] == b_lab[j] else 1, min)


def _min3(a, b, c):
    return np.minimum(np.minimum(a, b), c)


def tree_edit_distance_batch(shape1: FieldTree, labels1, shape2: FieldTree, labels2) -> np.ndarray:
    """TED for every relabeling pair of two fixed tree shapes.

    ``labels1`` is ``[L1, n1]`` (one row of postorder node labels per
    relabeling of ``shape1``), likewise ``labels2``.  Returns ``[L1, L2]``
    distances, identical to calling :func:`tree_edit_distance` per pair.
    """
    _, a_lml, a_kr = _annotate(shape1)
    _, b_lml, b_kr = _annotate(shape2)
    labels1, labels2 = np.asarray(labels1), np.asarray(labels2)
    if labels1.ndim != 2 or labels1.shape[1] != len(a_lml):
        raise ValueError(f"labels1 must be [L1, {len(a_lml)}], got {labels1.shape}")
    if labels2.ndim != 2 or labels2.shape[1] != len(b_lml):
        raise ValueError(f"labels2 must be [L2, {len(b_lml)}], got {labels2.shape}")
    neq = {}

    def relabel(i, j):
        key = (i, j)
        if key not in neq:
            neq[key] = (labels1[:, i, None] != labels2[None, :, j]).astype(np.int8)
        return neq[key]

    out = _zhang_shasha(a_lml, a_kr, b_lml, b_kr, relabel, _min3)
    return np.broadcast_to(np.asarray(out, dtype=np.int64), (len(labels1), len(labels2))).copy()


def nted_accuracy(pred: FieldTree, gold: FieldTree) -> float:
    """1 - TED / max(|pred|, |gold|), clamped to [0, 1]."""
    denom = max(pred.size(), gold.size())
    return min(1.0, max(0.0, 1.0 - tree_edit_distance(pred, gold) / denom))


# ---------------------------------------------------------------------------
# field F1


def field_set(tree: FieldTree) -> Counter:
    """Multiset of ``(key_path, value)`` pairs taken from the value leaves."""
    out: Counter = Counter()

    def walk(node, path):
        for c in node.children:
            if c.children:
                walk(c, path + (c.label,))
            elif path:
                out[(".".join(path), c.label)] += 1

    for top in tree.children:
        if top.children:
            walk(top, (top.label,))
    return out


def field_f1(pred: Counter, gold: Counter) -> dict[str, float]:
    n_pred, n_gold = sum(pred.values()), sum(gold.values())
    if n_pred == 0 and n_gold == 0:
        return {"precision": 1.0, "recall": 1.0, "f1": 1.0}
    tp = sum((pred & gold).values())
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 0.0 if tp == 0 else 2 * precision * recall / (precision + recall)
    return {"precision": precision, "recall": recall, "f1": f1}
