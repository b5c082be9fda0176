"""Toy image-to-sequence transformer: patch encoder, optional adapter, causal decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor, no_grad

VARIANTS = ("teacher", "small", "pruned")
EMBEDDING_PARAMS = ("enc.pos", "dec.tok", "dec.pos")
MASK_VALUE = -1e30


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_h: int = 40
    image_w: int = 96
    patch: int = 8
    d_enc: int = 64
    d_dec: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 55
    max_len: int = 48
    adapter_bottleneck: int | None = None

    def __post_init__(self):
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}")
        if self.d_enc % self.n_heads or self.d_dec % self.n_heads:
            raise ConfigError(f"widths {self.d_enc}/{self.d_dec} not divisible by {self.n_heads} heads")
        if (self.adapter_bottleneck is not None) != (self.d_enc != self.d_dec):
            raise ConfigError("adapter_bottleneck must be set exactly when d_enc != d_dec")
        if min(self.n_enc_layers, self.n_dec_layers, self.vocab_size, self.max_len) < 1:
            raise ConfigError("layer counts, vocab_size and max_len must be positive")

    @property
    def n_patches(self) -> int:
        return (self.image_h // self.patch) * (self.image_w // self.patch)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _linear_shapes(prefix, d_in, d_out):
    return [(f"{prefix}.w", (d_in, d_out)), (f"{prefix}.b", (d_out,))]


def _norm_shapes(prefix, d):
    return [(f"{prefix}.g", (d,)), (f"{prefix}.b", (d,))]


def _attn_shapes(prefix, d_q, d_kv):
    out = []
    out += _linear_shapes(f"{prefix}.q", d_q, d_q)
    out += _linear_shapes(f"{prefix}.k", d_kv, d_q)
    out += _linear_shapes(f"{prefix}.v", d_kv, d_q)
    out += _linear_shapes(f"{prefix}.o", d_q, d_q)
    return out


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered ``(name, shape)`` for every parameter of a model with ``cfg``."""
    de, dd = cfg.d_enc, cfg.d_dec
    shapes = _linear_shapes("enc.patch", cfg.patch * cfg.patch, de)
    shapes.append(("enc.pos", (cfg.n_patches, de)))
    for i in range(cfg.n_enc_layers):
        p = f"enc.{i}"
        shapes += _norm_shapes(f"{p}.ln1", de) + _attn_shapes(f"{p}.attn", de, de)
        shapes += _norm_shapes(f"{p}.ln2", de)
        shapes += _linear_shapes(f"{p}.ff1", de, cfg.d_ff) + _linear_shapes(f"{p}.ff2", cfg.d_ff, de)
    shapes += _norm_shapes("enc.ln_f", de)
    if cfg.adapter_bottleneck is not None:
        b = cfg.adapter_bottleneck
        shapes += _linear_shapes("adapter.down", de, b) + _linear_shapes("adapter.up", b, dd)
    shapes.append(("dec.tok", (cfg.vocab_size, dd)))
    shapes.append(("dec.pos", (cfg.max_len, dd)))
    for j in range(cfg.n_dec_layers):
        p = f"dec.{j}"
        shapes += _norm_shapes(f"{p}.ln1", dd) + _attn_shapes(f"{p}.self", dd, dd)
        shapes += _norm_shapes(f"{p}.ln2", dd) + _attn_shapes(f"{p}.cross", dd, dd)
        shapes += _norm_shapes(f"{p}.ln3", dd)
        shapes += _linear_shapes(f"{p}.ff1", dd, cfg.d_ff) + _linear_shapes(f"{p}.ff2", cfg.d_ff, dd)
    shapes += _norm_shapes("dec.ln_f", dd)
    shapes += _linear_shapes("head", dd, cfg.vocab_size)
    return shapes


def is_embedding(name: str) -> bool:
    return name in EMBEDDING_PARAMS


class Model:
    """Named parameters plus the config and variant tag they belong to."""

    def __init__(self, config: ModelConfig, variant: str = "teacher", seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        if variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.config = config
        self.variant = variant
        shapes = param_shapes(config)
        if params is None:
            params = self._init(shapes, seed)
        missing = [n for n, _ in shapes if n not in params]
        if missing:
            raise ContractError(f"missing parameters: {missing}")
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes:
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ContractError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = ad.parameter(arr)

    @staticmethod
    def _init(shapes, seed):
        # projections ~ N(0, 1/fan_in); embeddings ~ N(0, 0.02^2)
        rng = np.random.default_rng(seed)
        out = {}
        for name, shape in shapes:
            if name.endswith(".g"):
                out[name] = np.ones(shape)
            elif name.endswith(".b"):
                out[name] = np.zeros(shape)
            elif is_embedding(name):
                out[name] = rng.normal(0.0, 0.02, size=shape)
            else:
                out[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        return out

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def copy(self, variant: str | None = None) -> "Model":
        return Model(self.config, variant or self.variant, params=self.state_dict())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def has_adapter(self) -> bool:
        return self.config.adapter_bottleneck is not None


# ---------------------------------------------------------------------------
# building blocks


def _linear(m: Model, prefix: str, x: Tensor) -> Tensor:
    return ad.matmul(x, m[f"{prefix}.w"]) + m[f"{prefix}.b"]


def _norm(m: Model, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, m[f"{prefix}.g"], m[f"{prefix}.b"])


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))


def _attention(m: Model, prefix: str, xq: Tensor, xkv: Tensor, mask: np.ndarray | None) -> Tensor:
    h = m.config.n_heads
    q = _split_heads(_linear(m, f"{prefix}.q", xq), h)
    k = _split_heads(_linear(m, f"{prefix}.k", xkv), h)
    v = _split_heads(_linear(m, f"{prefix}.v", xkv), h)
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + mask
    ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
    b, _, n, dh = ctx.shape
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, n, h * dh))
    return _linear(m, f"{prefix}.o", ctx)


def _ffn(m: Model, prefix: str, x: Tensor) -> Tensor:
    return _linear(m, f"{prefix}.ff2", ad.gelu(_linear(m, f"{prefix}.ff1", x)))


def causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), MASK_VALUE), k=1)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, H, W]`` -> ``[B, n_patches, patch*patch]``, patches in row-major order."""
    b, h, w = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch)


def _as_batch(images) -> tuple[np.ndarray, bool]:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None], True
    return arr, False


# ---------------------------------------------------------------------------
# forward passes


def encode_with_taps(model: Model, images) -> tuple[Tensor, list[Tensor]]:
    cfg = model.config
    imgs, _ = _as_batch(images)
    if imgs.shape[1:] != (cfg.image_h, cfg.image_w):
        raise ContractError(f"image shape {imgs.shape[1:]} != config {(cfg.image_h, cfg.image_w)}")
    x = _linear(model, "enc.patch", Tensor(patchify(imgs, cfg.patch))) + model["enc.pos"]
    taps = []
    for i in range(cfg.n_enc_layers):
        p = f"enc.{i}"
        h = _norm(model, f"{p}.ln1", x)
        x = x + _attention(model, f"{p}.attn", h, h, None)
        x = x + _ffn(model, p, _norm(model, f"{p}.ln2", x))
        taps.append(x)
    return _norm(model, "enc.ln_f", x), taps


def encode(model: Model, image) -> Tensor:
    """Visual tokens ``[n_patches, d_enc]`` (or ``[B, n_patches, d_enc]`` for a batch)."""
    out, _ = encode_with_taps(model, image)
    _, single = _as_batch(image)
    return ad.reshape(out, out.shape[1:]) if single else out


def adapter(model: Model, tokens: Tensor) -> Tensor:
    """Bottleneck MLP ``d_enc -> b -> d_dec``; identity when the widths agree."""
    cfg = model.config
    if not model.has_adapter():
        if cfg.d_enc != cfg.d_dec:
            raise ConfigError("model has no adapter but d_enc != d_dec")
        return tokens
    return _linear(model, "adapter.up", ad.gelu(_linear(model, "adapter.down", tokens)))


def decode_with_taps(model: Model, memory: Tensor, tokens) -> tuple[Tensor, list[Tensor]]:
    cfg = model.config
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    t = ids.shape[1]
    if t > cfg.max_len:
        raise ContractError(f"sequence length {t} exceeds max_len {cfg.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ContractError(f"token id outside [0, {cfg.vocab_size})")
    if memory.ndim == 2:
        memory = ad.reshape(memory, (1,) + memory.shape)
    x = ad.embedding(model["dec.tok"], ids) + ad.take_rows(model["dec.pos"], slice(0, t))
    mask = causal_mask(t)
    taps = []
    for j in range(cfg.n_dec_layers):
        p = f"dec.{j}"
        h = _norm(model, f"{p}.ln1", x)
        x = x + _attention(model, f"{p}.self", h, h, mask)
        x = x + _attention(model, f"{p}.cross", _norm(model, f"{p}.ln2", x), memory, None)
        x = x + _ffn(model, p, _norm(model, f"{p}.ln3", x))
        taps.append(x)
    return _linear(model, "head", _norm(model, "dec.ln_f", x)), taps


def decode_logits(model: Model, memory: Tensor, target_tokens) -> Tensor:
    """Teacher-forced logits ``[t, vocab]`` (batched when ``target_tokens`` is 2-D)."""
    logits, _ = decode_with_taps(model, memory, target_tokens)
    if np.asarray(target_tokens).ndim == 1:
        return ad.reshape(logits, logits.shape[1:])
    return logits


def forward(model: Model, images, decoder_inputs) -> Tensor:
    """Batched logits ``[B, t, vocab]`` for images and teacher-forced inputs."""
    memory, _ = encode_with_taps(model, images)
    logits, _ = decode_with_taps(model, adapter(model, memory), decoder_inputs)
    return logits


def greedy_decode(model: Model, images, max_len: int | None = None, bos_id: int = 1,
                  eos_id: int = 2) -> list[list[int]]:
    """Argmax decoding from BOS until EOS or ``max_len`` generated tokens.

    Accepts one image or a batch; returns the generated body (no BOS/EOS) for
    each image.  Ties go to the lowest token id.
    """
    cfg = model.config
    limit = cfg.max_len if max_len is None else min(max_len, cfg.max_len)
    imgs, single = _as_batch(images)
    b = imgs.shape[0]
    with no_grad():
        memory, _ = encode_with_taps(model, imgs)
        memory = adapter(model, memory)
        seq = np.full((b, 1), bos_id, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        out: list[list[int]] = [[] for _ in range(b)]
        for _ in range(limit):
            logits, _ = decode_with_taps(model, memory, seq)
            nxt = np.argmax(logits.data[:, -1, :], axis=-1)
            for i in np.nonzero(~done)[0]:
                if nxt[i] == eos_id:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
            if done.all() or seq.shape[1] >= limit:
                break
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# bookkeeping


def count_params(model: Model) -> dict[str, int]:
    emb = non = nz_non = nz_emb = 0
    for name, p in model.params.items():
        n = p.data.size
        nz = int(np.count_nonzero(p.data))
        if is_embedding(name):
            emb += n
            nz_emb += nz
        else:
            non += n
            nz_non += nz
    return {"non_embedding": non, "embedding": emb, "total": non + emb,
            "nonzero_non_embedding": nz_non, "nonzero_total": nz_non + nz_emb}


@dataclass
class LayerTap:
    name: str
    values: np.ndarray


def _pool(x: np.ndarray, lengths: np.ndarray | None) -> np.ndarray:
    if lengths is None:
        return x.mean(axis=1)
    idx = np.arange(x.shape[1])[None, :, None] < lengths[:, None, None]
    return (x * idx).sum(axis=1) / lengths[:, None]


def capture_activations(model: Model, images, token_seqs, bos_id: int = 1,
                        pad_id: int = 0) -> list[LayerTap]:
    """Mean-pooled block outputs ``[m, d]`` for every encoder and decoder block.

    Decoder blocks see the teacher-forced sequence ``[BOS] + tokens``; pooling
    covers only the real (unpadded) positions.
    """
    imgs, _ = _as_batch(images)
    m = imgs.shape[0]
    if m < 2:
        raise ContractError("capture_activations needs at least 2 probe examples")
    if len(token_seqs) != m:
        raise ContractError(f"{len(token_seqs)} token sequences for {m} images")
    inputs, _ = pad_batch([[bos_id] + list(s) for s in token_seqs], pad_id)
    inputs = inputs[:, : model.config.max_len]
    lengths = np.minimum([len(s) + 1 for s in token_seqs], model.config.max_len)
    with no_grad():
        memory, enc_taps = encode_with_taps(model, imgs)
        _, dec_taps = decode_with_taps(model, adapter(model, memory), inputs)
    taps = [LayerTap(f"enc.{i}", _pool(t.data, None)) for i, t in enumerate(enc_taps)]
    taps += [LayerTap(f"dec.{j}", _pool(t.data, np.asarray(lengths, dtype=float)))
             for j, t in enumerate(dec_taps)]
    return taps


def pad_batch(seqs, pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    t = max(len(s) for s in seqs)
    out = np.full((len(seqs), t), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, np.array([len(s) for s in seqs])


def with_variant(cfg: ModelConfig, **changes) -> ModelConfig:
    return replace(cfg, **changes)
