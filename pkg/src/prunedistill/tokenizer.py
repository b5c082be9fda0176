"""Character-level vocabulary with special and field-delimiter tokens."""

from __future__ import annotations

from .font import GLYPHS

PAD, BOS, EOS, NEWLINE = "<pad>", "<s>", "</s>", "\n"
SPECIALS = (PAD, BOS, EOS, NEWLINE)
FIELD_KEYS = ("name", "item", "value", "weight", "date", "total")


def open_tag(label: str) -> str:
    return f"<s_{label}>"


def close_tag(label: str) -> str:
    return f"</s_{label}>"


class Tokenizer:
    """Maps strings of glyphs / field tags to integer ids and back.

    Ids are assigned in a fixed order: specials, glyphs, then one open/close
    pair per field key.
    """

    def __init__(self, field_keys=FIELD_KEYS, glyphs=GLYPHS):
        self.field_keys = tuple(field_keys)
        self.glyphs = tuple(glyphs)
        tokens = list(SPECIALS) + list(self.glyphs)
        for k in self.field_keys:
            tokens += [open_tag(k), close_tag(k)]
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def encode_text(self, text: str) -> list[int]:
        return [self.id(ch) for ch in text]

    def encode_tokens(self, tokens) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids) -> list[str]:
        """Token strings for ``ids``, stopping at EOS and skipping PAD/BOS."""
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            out.append(self.tokens[i])
        return out

    def decode_text(self, ids) -> str:
        return "".join(self.decode(ids))

    def signature(self) -> list[str]:
        return list(self.tokens)
