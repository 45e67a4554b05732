"""A deliberately small encoder-decoder translation model.

One (configurable) stack of single-head attention layers on each side,
64-dim embeddings, 128-dim ReLU feed-forwards, learned positional
embeddings, residual connections, and a shared source/target vocabulary.
All math runs through the tape ops in :mod:`gatedkd.autodiff`, so a single
forward call serves both training (with a tape) and evaluation (without).

The decoder is teacher-forced: for targets ``[BOS, y_1, ..., y_n, EOS]``
the forward pass consumes ``target_ids[:, :-1]`` and emits one logit row
per *next* token, so ``logits[:, t]`` scores ``target_ids[:, t + 1]`` and
depends only on target positions ``<= t``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from gatedkd import autodiff as ad
from gatedkd import kernels
from gatedkd.errors import CapacityError, CheckpointError, ValidationError

# Additive score bias for disallowed attention edges. Large enough that the
# post-softmax weight underflows to an exact 0.0.
MASK_BIAS = -1e9

_CKPT_MAGIC = b"GKDCKPT1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_len: int
    embed_dim: int = 64
    ffn_dim: int = 128
    num_layers: int = 1
    dropout: float = 0.0

    def __post_init__(self):
        if self.vocab_size < 5:
            raise ValidationError(f"vocab_size must cover the 4 reserved ids plus content, got {self.vocab_size}")
        if self.max_len < 2:
            raise ValidationError(f"max_len must be at least 2, got {self.max_len}")
        if min(self.embed_dim, self.ffn_dim, self.num_layers) < 1:
            raise ValidationError("embed_dim, ffn_dim and num_layers must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must lie in [0, 1), got {self.dropout}")


def _param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) order; initialization and checkpoints share it."""
    d, f = config.embed_dim, config.ffn_dim
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (config.vocab_size, d)),
        ("pos_emb", (config.max_len, d)),
    ]
    for side, blocks in (("enc", ("self",)), ("dec", ("self", "cross"))):
        for i in range(config.num_layers):
            for block in blocks:
                for w in ("wq", "wk", "wv", "wo"):
                    shapes.append((f"{side}{i}.{block}.{w}", (d, d)))
            shapes.append((f"{side}{i}.ffn.w1", (d, f)))
            shapes.append((f"{side}{i}.ffn.b1", (f,)))
            shapes.append((f"{side}{i}.ffn.w2", (f, d)))
            shapes.append((f"{side}{i}.ffn.b2", (d,)))
    shapes.append(("out.w", (d, config.vocab_size)))
    shapes.append(("out.b", (config.vocab_size,)))
    return shapes


class ModelParams:
    """Named parameter tensors with a fixed iteration order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, ad.DualTensor]):
        expected = _param_shapes(config)
        if [n for n, _ in expected] != list(tensors):
            raise ValidationError("parameter names do not match the model layout")
        for name, shape in expected:
            if tensors[name].value.shape != shape:
                raise ValidationError(f"parameter {name} has shape {tensors[name].value.shape}, expected {shape}")
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "ModelParams":
        """Weights ~ U(-0.08, 0.08), biases exactly zero, drawn in layout order."""
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        tensors = {}
        for name, shape in _param_shapes(config):
            if name.endswith((".b1", ".b2", ".b")):
                tensors[name] = ad.DualTensor(np.zeros(shape))
            else:
                tensors[name] = ad.DualTensor(rng.uniform(-0.08, 0.08, size=shape))
        return cls(config, tensors)

    def __getitem__(self, name: str) -> ad.DualTensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: ad.DualTensor(t.value.copy()) for n, t in self.items()})

    def num_parameters(self) -> int:
        return sum(t.value.size for t in self.tensors.values())

    def checksum(self) -> str:
        """sha256 over the raw tensor bytes in layout order."""
        h = hashlib.sha256()
        for name, t in self.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.value).tobytes())
        return h.hexdigest()


@dataclass
class Batch:
    """Padded id grids plus boolean validity masks (True on real tokens).

    Targets carry BOS at position 0 and EOS as the final real token; padding
    always trails the real span.
    """

    source_ids: np.ndarray
    source_mask: np.ndarray
    target_ids: np.ndarray
    target_mask: np.ndarray

    def __post_init__(self):
        self.source_ids = np.asarray(self.source_ids, dtype=np.int64)
        self.target_ids = np.asarray(self.target_ids, dtype=np.int64)
        self.source_mask = np.asarray(self.source_mask, dtype=bool)
        self.target_mask = np.asarray(self.target_mask, dtype=bool)

    @property
    def size(self) -> int:
        return self.source_ids.shape[0]

    def gold_mask(self) -> np.ndarray:
        """Validity of each *predicted* position: target_mask shifted off BOS."""
        return self.target_mask[:, 1:]

    def gold_ids(self) -> np.ndarray:
        return self.target_ids[:, 1:]

    def validate(self, vocab_size: int) -> None:
        if self.source_ids.ndim != 2 or self.target_ids.ndim != 2:
            raise ValidationError("batch id grids must be 2-D")
        if self.source_mask.shape != self.source_ids.shape or self.target_mask.shape != self.target_ids.shape:
            raise ValidationError("batch mask shapes do not match id shapes")
        if self.source_ids.shape[0] != self.target_ids.shape[0] or self.size == 0:
            raise ValidationError("source and target batch sizes differ or are empty")
        if self.target_ids.shape[1] < 2:
            raise ValidationError("targets need BOS plus at least one predicted token")
        for name, ids, mask in (("source", self.source_ids, self.source_mask),
                                ("target", self.target_ids, self.target_mask)):
            if ids.min() < 0 or ids.max() >= vocab_size:
                raise ValidationError(f"{name} ids fall outside [0, {vocab_size})")
            lengths = mask.sum(axis=1)
            if (mask != (np.arange(mask.shape[1]) < lengths[:, None])).any():
                raise ValidationError(f"{name} mask is not a contiguous prefix; padding must trail the tokens")
        if (self.source_mask.sum(axis=1) < 1).any():
            raise ValidationError("every row needs at least one real source token")
        if (self.target_mask.sum(axis=1) < 2).any():
            raise ValidationError("every row needs BOS plus at least one real target position")


def _attention(q_in, kv_in, bias, prefix, params, tape):
    d = params.config.embed_dim
    q = ad.matmul(q_in, params[f"{prefix}.wq"], tape)
    k = ad.matmul(kv_in, params[f"{prefix}.wk"], tape)
    v = ad.matmul(kv_in, params[f"{prefix}.wv"], tape)
    scores = ad.scale(ad.bmm_nt(q, k, tape), 1.0 / np.sqrt(d), tape)
    weights = ad.softmax(ad.add_const(scores, bias, tape), 1.0, tape)
    return ad.matmul(ad.bmm(weights, v, tape), params[f"{prefix}.wo"], tape)


def _ffn(x, prefix, params, tape):
    h = ad.relu(ad.add_bias(ad.matmul(x, params[f"{prefix}.w1"], tape), params[f"{prefix}.b1"], tape), tape)
    return ad.add_bias(ad.matmul(h, params[f"{prefix}.w2"], tape), params[f"{prefix}.b2"], tape)


def _maybe_dropout(x, p, rng, tape):
    if p > 0.0 and rng is not None:
        keep = (rng.random(x.value.shape) >= p) / (1.0 - p)
        return ad.mul_const(x, keep, tape)
    return x


def _positions(b: int, n: int) -> np.ndarray:
    return np.broadcast_to(np.arange(n), (b, n))


def forward(params: ModelParams, batch: Batch, tape: ad.Tape | None = None,
            dropout_rng: np.random.Generator | None = None) -> ad.DualTensor:
    """Teacher-forced logits of shape (B, T-1, vocab); slot t scores token t+1.

    Pass a tape to build gradients; omit it for pure evaluation. Dropout only
    fires when the config enables it *and* a generator is supplied.
    """
    cfg = params.config
    batch.validate(cfg.vocab_size)
    b, s = batch.source_ids.shape
    t_in = batch.target_ids.shape[1] - 1
    if s > cfg.max_len or t_in > cfg.max_len:
        raise CapacityError(
            f"sequence length (source {s}, target {t_in}) exceeds the positional table ({cfg.max_len})"
        )

    p, rng = cfg.dropout, dropout_rng
    src_bias = np.where(batch.source_mask, 0.0, MASK_BIAS)[:, None, :]

    x = ad.add(ad.embed(params["tok_emb"], batch.source_ids, tape),
               ad.embed(params["pos_emb"], _positions(b, s), tape), tape)
    x = _maybe_dropout(x, p, rng, tape)
    for i in range(cfg.num_layers):
        x = ad.add(x, _maybe_dropout(_attention(x, x, src_bias, f"enc{i}.self", params, tape), p, rng, tape), tape)
        x = ad.add(x, _maybe_dropout(_ffn(x, f"enc{i}.ffn", params, tape), p, rng, tape), tape)
    memory = x

    dec_ids = batch.target_ids[:, :-1]
    causal_bias = np.where(np.tril(np.ones((t_in, t_in), dtype=bool)), 0.0, MASK_BIAS)[None, :, :]
    y = ad.add(ad.embed(params["tok_emb"], dec_ids, tape),
               ad.embed(params["pos_emb"], _positions(b, t_in), tape), tape)
    y = _maybe_dropout(y, p, rng, tape)
    for i in range(cfg.num_layers):
        y = ad.add(y, _maybe_dropout(_attention(y, y, causal_bias, f"dec{i}.self", params, tape), p, rng, tape), tape)
        y = ad.add(y, _maybe_dropout(_attention(y, memory, src_bias, f"dec{i}.cross", params, tape), p, rng, tape), tape)
        y = ad.add(y, _maybe_dropout(_ffn(y, f"dec{i}.ffn", params, tape), p, rng, tape), tape)

    return ad.add_bias(ad.matmul(y, params["out.w"], tape), params["out.b"], tape)


def next_token_dist(params: ModelParams, batch: Batch, temperature: float = 1.0) -> np.ndarray:
    """Per-position predictive distributions (B, T-1, V) at the given temperature."""
    if temperature <= 0.0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    logits = forward(params, batch).value
    flat = kernels.active().softmax(logits.reshape(-1, logits.shape[-1]), temperature)
    return flat.reshape(logits.shape)


def sentence_logprob(params: ModelParams, batch: Batch, temperature: float = 1.0) -> np.ndarray:
    """Summed gold-token log-probability per sentence, (B,), EOS included."""
    if temperature <= 0.0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    logits = forward(params, batch).value
    logp = kernels.active().log_softmax(logits.reshape(-1, logits.shape[-1]), temperature)
    logp = logp.reshape(logits.shape)
    gold = np.take_along_axis(logp, batch.gold_ids()[:, :, None], axis=-1)[:, :, 0]
    return (gold * batch.gold_mask()).sum(axis=1)


# ---------------------------------------------------------------------------
# Checkpoints: magic + JSON header + raw little-endian float64 buffers.
# Deliberately not an archive format so identical states produce identical
# bytes (no timestamps, no compression metadata).
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, params: ModelParams, extra: dict | None = None) -> None:
    header = {
        "format_version": 1,
        "config": asdict(params.config),
        "tensor_order": [n for n, _ in params.items()],
        "shapes": {n: list(t.value.shape) for n, t in params.items()},
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in params.items():
            fh.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[ModelParams, dict]:
    # an unreadable file is the caller's I/O problem (OSError propagates);
    # CheckpointError is reserved for files whose *content* is not a checkpoint
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(_CKPT_MAGIC) + 8 or raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a model checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<Q", raw, len(_CKPT_MAGIC))
    start = len(_CKPT_MAGIC) + 8
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from exc
    if header.get("format_version") != 1:
        raise CheckpointError(f"unsupported checkpoint format_version {header.get('format_version')!r}")
    config = ModelConfig(**header["config"])
    offset = start + hlen
    tensors = {}
    for name in header["tensor_order"]:
        shape = tuple(header["shapes"][name])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64)) if shape else 8
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path} is truncated at tensor {name}")
        tensors[name] = ad.DualTensor(np.frombuffer(chunk, dtype="<f8").reshape(shape).copy())
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path} has {len(raw) - offset} trailing bytes")
    try:
        params = ModelParams(config, tensors)
    except ValidationError as exc:
        raise CheckpointError(f"{path} does not match the model layout: {exc}") from exc
    return params, header["extra"]
