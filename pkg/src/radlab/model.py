"""Encoder-decoder transformer in the T5 style.

Layout per layer is pre-norm with RMS normalization (no centering, no bias):

* encoder: ``x += SelfAttn(norm(x)); x += FFN(norm(x))``
* decoder: causal self-attention, cross-attention over encoder states, FFN
* one learned relative-position bias table per stack (buckets x heads), shared
  by all layers of that stack; encoder buckets are bidirectional, decoder
  buckets look only backwards
* attention scores are scaled by ``head_dim ** -0.5``
* FFN is ``relu(x W_in) W_out``
* token embedding is shared by encoder input, decoder input and the output
  projection; logits are ``h E^T * d_model ** -0.5``

Initialization: embeddings ~ N(0, 1); every projection matrix and the bias
tables ~ N(0, d_model ** -0.5); norm gains are ones.

The decoder is fed ``[pad] + target`` and predicts ``target + [eos]``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor
from .tokenizer import EOS, PAD

MAX_CONTEXT = 512


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_heads: int
    d_ff: int
    n_enc_layers: int
    n_dec_layers: int
    max_context: int = MAX_CONTEXT
    rel_pos_buckets: int = 32
    rel_pos_max_distance: int = 128

    def __post_init__(self) -> None:
        for name in ("vocab_size", "d_model", "n_heads", "d_ff", "n_enc_layers", "n_dec_layers", "rel_pos_buckets"):
            if getattr(self, name) < 1:
                raise ContractError(f"model config: {name} must be positive")
        if self.d_model % self.n_heads:
            raise ContractError(f"model config: d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 1 <= self.max_context <= MAX_CONTEXT:
            raise ContractError(f"model config: max_context must lie in [1, {MAX_CONTEXT}], got {self.max_context}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})


PRESETS = {
    "toy": ModelConfig(vocab_size=4096, d_model=64, n_heads=4, d_ff=256, n_enc_layers=2, n_dec_layers=2),
    # Shapes below only reproduce the advertised parameter counts of the three
    # published scales; the real layer/width choices were not disclosed.
    "220m": ModelConfig(vocab_size=32128, d_model=768, n_heads=12, d_ff=3072, n_enc_layers=12, n_dec_layers=12),
    "770m": ModelConfig(vocab_size=32128, d_model=1024, n_heads=16, d_ff=4096, n_enc_layers=24, n_dec_layers=24),
    "3b": ModelConfig(vocab_size=32128, d_model=2048, n_heads=32, d_ff=8192, n_enc_layers=24, n_dec_layers=24),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ContractError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    return base.replace(**overrides) if overrides else base


def param_shapes(cfg: ModelConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    """Every parameter name and shape, in the fixed order used for init and files."""
    d, f, h = cfg.d_model, cfg.d_ff, cfg.n_heads
    yield "shared.embedding", (cfg.vocab_size, d)
    yield "encoder.rel_bias", (cfg.rel_pos_buckets, h)
    for i in range(cfg.n_enc_layers):
        pre = f"encoder.{i}"
        yield f"{pre}.attn_norm", (d,)
        for w in "qkvo":
            yield f"{pre}.attn.{w}", (d, d)
        yield f"{pre}.ff_norm", (d,)
        yield f"{pre}.ff.wi", (d, f)
        yield f"{pre}.ff.wo", (f, d)
    yield "encoder.final_norm", (d,)
    yield "decoder.rel_bias", (cfg.rel_pos_buckets, h)
    for i in range(cfg.n_dec_layers):
        pre = f"decoder.{i}"
        yield f"{pre}.self_norm", (d,)
        for w in "qkvo":
            yield f"{pre}.self.{w}", (d, d)
        yield f"{pre}.cross_norm", (d,)
        for w in "qkvo":
            yield f"{pre}.cross.{w}", (d, d)
        yield f"{pre}.ff_norm", (d,)
        yield f"{pre}.ff.wi", (d, f)
        yield f"{pre}.ff.wo", (f, d)
    yield "decoder.final_norm", (d,)


def count_params(cfg: ModelConfig) -> int:
    return sum(math.prod(shape) for _, shape in param_shapes(cfg))


class ModelParams:
    """Named parameter tensors for one :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = dict(param_shapes(config))
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ContractError(f"parameter names disagree with config (missing {missing[:3]}, extra {extra[:3]})")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ContractError(f"parameter {name} has shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = {name: tensors[name] for name in expected}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray], requires_grad: bool = True) -> "ModelParams":
        return cls(config, {k: Tensor(v, requires_grad=requires_grad) for k, v in arrays.items()})

    def num_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def init(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    proj_std = cfg.d_model**-0.5
    tensors = {}
    for name, shape in param_shapes(cfg):
        if name.endswith("norm"):
            arr = np.ones(shape)
        elif name == "shared.embedding":
            arr = rng.standard_normal(shape)
        else:
            arr = rng.standard_normal(shape) * proj_std
        tensors[name] = Tensor(arr, requires_grad=True)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------------------
# Relative positions
# ---------------------------------------------------------------------------


def relative_position_bucket(relative: np.ndarray, bidirectional: bool, num_buckets: int, max_distance: int) -> np.ndarray:
    """Bucket index for ``key_pos - query_pos``: exact near zero, log-spaced further out."""
    n = -np.asarray(relative, dtype=np.int64)
    ret = np.zeros_like(n)
    if bidirectional:
        num_buckets //= 2
        ret += (n < 0) * num_buckets
        n = np.abs(n)
    else:
        n = np.maximum(n, 0)
    max_exact = max(num_buckets // 2, 1)
    with np.errstate(divide="ignore"):
        large = max_exact + (
            np.log(np.maximum(n, 1) / max_exact) / math.log(max(max_distance / max_exact, 1 + 1e-9)) * (num_buckets - max_exact)
        ).astype(np.int64)
    large = np.minimum(large, num_buckets - 1)
    return ret + np.where(n < max_exact, n, large)


@functools.lru_cache(maxsize=256)
def _bucket_matrix(q_len: int, k_len: int, bidirectional: bool, num_buckets: int, max_distance: int) -> np.ndarray:
    rel = np.arange(k_len)[None, :] - np.arange(q_len)[:, None]
    out = relative_position_bucket(rel, bidirectional, num_buckets, max_distance)
    out.flags.writeable = False
    return out


def _position_bias(p: ModelParams, stack: str, q_len: int, k_len: int) -> Tensor:
    cfg = p.config
    buckets = _bucket_matrix(q_len, k_len, stack == "encoder", cfg.rel_pos_buckets, cfg.rel_pos_max_distance)
    bias = T.embedding(p[f"{stack}.rel_bias"], buckets)  # (q, k, H)
    return T.reshape(T.transpose(bias, (2, 0, 1)), (1, cfg.n_heads, q_len, k_len))


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def _linear(x: Tensor, w: Tensor) -> Tensor:
    b, t, d = x.shape
    return T.reshape(T.matmul(T.reshape(x, (b * t, d)), w), (b, t, w.shape[1]))


def _heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _attention(p: ModelParams, pre: str, xq: Tensor, xkv: Tensor, bias: Tensor | None, mask: np.ndarray) -> Tensor:
    cfg = p.config
    h = cfg.n_heads
    q = _heads(_linear(xq, p[f"{pre}.q"]), h)
    k = _heads(_linear(xkv, p[f"{pre}.k"]), h)
    v = _heads(_linear(xkv, p[f"{pre}.v"]), h)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), cfg.head_dim**-0.5)
    if bias is not None:
        scores = T.add(scores, T.expand(bias, scores.shape))
    ctx = T.matmul(T.softmax(scores, mask), v)  # (B, H, Tq, dh)
    b, _, tq, _ = ctx.shape
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, tq, cfg.d_model))
    return _linear(ctx, p[f"{pre}.o"])


def _ffn(p: ModelParams, pre: str, x: Tensor) -> Tensor:
    return _linear(T.relu(_linear(x, p[f"{pre}.wi"])), p[f"{pre}.wo"])


def _as_batch(ids) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ContractError(f"token ids must be 1-D or 2-D, got shape {arr.shape}")
    return arr


def _check_len(p: ModelParams, n: int, what: str) -> None:
    if n > p.config.max_context:
        raise ContractError(f"{what} length {n} exceeds max_context {p.config.max_context}; truncate first")
    if n < 1:
        raise ContractError(f"{what} is empty")


def encode(p: ModelParams, src_ids, src_mask: np.ndarray | None = None) -> Tensor:
    """Encoder states ``(B, S, d)``. Without a mask, pad ids are masked out."""
    src = _as_batch(src_ids)
    _check_len(p, src.shape[1], "source")
    if src_mask is None:
        src_mask = src != PAD
    s = src.shape[1]
    key_mask = np.asarray(src_mask, dtype=bool)[:, None, None, :]
    bias = _position_bias(p, "encoder", s, s)
    x = T.embedding(p["shared.embedding"], src)
    for i in range(p.config.n_enc_layers):
        pre = f"encoder.{i}"
        n = T.rms_norm(x, p[f"{pre}.attn_norm"])
        x = T.add(x, _attention(p, f"{pre}.attn", n, n, bias, key_mask))
        x = T.add(x, _ffn(p, f"{pre}.ff", T.rms_norm(x, p[f"{pre}.ff_norm"])))
    return T.rms_norm(x, p["encoder.final_norm"])


def decode_hidden(p: ModelParams, enc: Tensor, src_mask: np.ndarray, tgt_in_ids) -> Tensor:
    tgt = _as_batch(tgt_in_ids)
    _check_len(p, tgt.shape[1], "decoder input")
    t = tgt.shape[1]
    causal = np.tril(np.ones((t, t), dtype=bool))[None, None]
    cross_mask = np.asarray(src_mask, dtype=bool)[:, None, None, :]
    bias = _position_bias(p, "decoder", t, t)
    y = T.embedding(p["shared.embedding"], tgt)
    for i in range(p.config.n_dec_layers):
        pre = f"decoder.{i}"
        n = T.rms_norm(y, p[f"{pre}.self_norm"])
        y = T.add(y, _attention(p, f"{pre}.self", n, n, bias, causal))
        n = T.rms_norm(y, p[f"{pre}.cross_norm"])
        y = T.add(y, _attention(p, f"{pre}.cross", n, enc, None, cross_mask))
        y = T.add(y, _ffn(p, f"{pre}.ff", T.rms_norm(y, p[f"{pre}.ff_norm"])))
    return T.rms_norm(y, p["decoder.final_norm"])


def project(p: ModelParams, hidden: Tensor) -> Tensor:
    """Tied output projection: ``(B, T, d) -> (B*T, V)``."""
    b, t, d = hidden.shape
    emb_t = T.transpose(p["shared.embedding"], (1, 0))
    return T.scale(T.matmul(T.reshape(hidden, (b * t, d)), emb_t), d**-0.5)


def forward(p: ModelParams, src_ids, tgt_in_ids, src_mask: np.ndarray | None = None) -> Tensor:
    """Teacher-forced logits: ``[|tgt|, V]`` for 1-D ids, ``[B, |tgt|, V]`` for batches."""
    single = np.asarray(tgt_in_ids).ndim == 1
    src = _as_batch(src_ids)
    tgt = _as_batch(tgt_in_ids)
    if src.shape[0] != tgt.shape[0]:
        raise ContractError(f"batch sizes differ: source {src.shape[0]}, target {tgt.shape[0]}")
    if src_mask is None:
        src_mask = src != PAD
    enc = encode(p, src, src_mask)
    logits = project(p, decode_hidden(p, enc, src_mask, tgt))
    b, t = tgt.shape
    return logits if single else T.reshape(logits, (b, t, p.config.vocab_size))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Batch:
    src: np.ndarray  # (B, S) right-padded with PAD
    src_mask: np.ndarray  # (B, S) bool
    dec_in: np.ndarray  # (B, T)
    labels: np.ndarray  # (B, T), PAD where ignored

    @property
    def n_tokens(self) -> int:
        return int((self.labels != PAD).sum())


def collate(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], append_eos: bool = True) -> Batch:
    """Pad ``(src, target)`` pairs into a batch.

    With ``append_eos`` the labels are ``target + [eos]``; otherwise the target
    is taken to already end with eos. The decoder input is the labels shifted
    right behind a pad start token.
    """
    if not pairs:
        raise ContractError("cannot collate an empty batch")
    labels_list = [list(t) + [EOS] if append_eos else list(t) for _, t in pairs]
    if any(len(s) == 0 for s, _ in pairs) or any(len(l) == 0 for l in labels_list):
        raise ContractError("empty source or target in batch")
    b = len(pairs)
    s_len = max(len(s) for s, _ in pairs)
    t_len = max(len(l) for l in labels_list)
    src = np.full((b, s_len), PAD, dtype=np.int64)
    mask = np.zeros((b, s_len), dtype=bool)
    dec_in = np.full((b, t_len), PAD, dtype=np.int64)
    labels = np.full((b, t_len), PAD, dtype=np.int64)
    for i, ((s, _), l) in enumerate(zip(pairs, labels_list)):
        src[i, : len(s)] = s
        mask[i, : len(s)] = True
        labels[i, : len(l)] = l
        dec_in[i, 1 : len(l)] = l[:-1]
    return Batch(src, mask, dec_in, labels)


def batch_loss(p: ModelParams, batch: Batch) -> Tensor:
    enc = encode(p, batch.src, batch.src_mask)
    logits = project(p, decode_hidden(p, enc, batch.src_mask, batch.dec_in))
    return T.cross_entropy(logits, batch.labels.reshape(-1), ignore_id=PAD)


def nll(p: ModelParams, src_ids: Sequence[int], tgt_ids: Sequence[int]) -> Tensor:
    """Mean token negative log-likelihood of ``tgt + [eos]`` given ``src``."""
    if len(tgt_ids) == 0:
        raise ContractError("nll needs a non-empty target")
    _check_len(p, len(src_ids), "source")
    _check_len(p, len(tgt_ids) + 1, "target")
    return batch_loss(p, collate([(src_ids, tgt_ids)]))
