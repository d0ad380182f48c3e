"""Prototype-attention model: parameters, initialization, forward pass, checkpoints.

The head scores each learned prototype against the input under H independent
attention heads. Per head i, the input embedding s and every prototype p_j are
linearly mapped to a query q_i and keys k_ij; the similarity (q_i . k_ij)/d_k
is squashed by a sigmoid into a score alpha_ij in (0,1); prototypes whose
score clears the threshold tau become the head's neighborhood, their scores
are normalized to weights gamma_ij, and the head emits the weighted key
mixture r_i. The concatenated [r_1; ...; r_H] feeds one linear layer + softmax.

Note the similarity divides by d_k itself, not sqrt(d_k); this is deliberate
and matched by the gradient code in :mod:`protohead.training`.

Checkpoint format (magic ``GAPC``, version 1, little-endian):

    magic "GAPC" | version u32 = 1 | config_len u32 | config UTF-8 JSON
    | tensor_count u32
    | per tensor: name_len u32, name UTF-8, rank u32, dims rank x u64,
      data f32 row-major

Tensor names: "prototypes", "wq.<i>", "wk.<i>", "out_weight", "out_bias".
Internal arithmetic is float64; tensors are rounded to float32 on save.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError

GAPC_MAGIC = b"GAPC"
GAPC_VERSION = 1

# Sigmoid outputs are clamped into the open interval so that the score of a
# fallback singleton can never be exactly 0 (which would make the gamma
# normalization 0/0) and the strict alpha-range contract holds even when the
# similarity saturates float64.
_ALPHA_FLOOR = 1e-300
_ALPHA_CEIL = 1.0 - 1e-16

DEFAULT_NUM_PROTOTYPES = 20
DEFAULT_NUM_HEADS = 4
DEFAULT_THRESHOLD = 0.5


def default_head_dim(dim: int, num_heads: int) -> int:
    """Head width used when none is given: ceil(dim / num_heads)."""
    return -(-dim // num_heads)


@dataclass
class ModelConfig:
    dim: int
    num_prototypes: int = DEFAULT_NUM_PROTOTYPES
    num_heads: int = DEFAULT_NUM_HEADS
    head_dim: int | None = None
    num_classes: int = 2
    threshold: float = DEFAULT_THRESHOLD
    seed: int = 0
    prototype_init: str = "sample"

    def __post_init__(self):
        if self.head_dim is None:
            self.head_dim = default_head_dim(self.dim, self.num_heads)
        for name in ("dim", "num_prototypes", "num_heads", "head_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie strictly in (0, 1), got {self.threshold}")
        if self.prototype_init not in ("sample", "gaussian"):
            raise ValueError(f"prototype_init must be 'sample' or 'gaussian', "
                             f"got {self.prototype_init!r}")

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "num_prototypes": self.num_prototypes,
            "num_heads": self.num_heads,
            "head_dim": self.head_dim,
            "num_classes": self.num_classes,
            "threshold": self.threshold,
            "seed": self.seed,
            "prototype_init": self.prototype_init,
        }


@dataclass
class ModelParams:
    """All learnable tensors, kept in float64 for training."""

    prototypes: np.ndarray        # (M, d)
    wq: list[np.ndarray]          # H x (d_k, d)
    wk: list[np.ndarray]          # H x (d_k, d)
    out_weight: np.ndarray        # (C, H * d_k)
    out_bias: np.ndarray          # (C,)

    def check_shapes(self, config: ModelConfig):
        m, d = config.num_prototypes, config.dim
        h, dk, c = config.num_heads, config.head_dim, config.num_classes
        if self.prototypes.shape != (m, d):
            raise ValueError(f"prototypes shape {self.prototypes.shape} != {(m, d)}")
        if len(self.wq) != h or len(self.wk) != h:
            raise ValueError(f"expected {h} heads, got {len(self.wq)} wq / {len(self.wk)} wk")
        for i in range(h):
            if self.wq[i].shape != (dk, d):
                raise ValueError(f"wq[{i}] shape {self.wq[i].shape} != {(dk, d)}")
            if self.wk[i].shape != (dk, d):
                raise ValueError(f"wk[{i}] shape {self.wk[i].shape} != {(dk, d)}")
        if self.out_weight.shape != (c, h * dk):
            raise ValueError(f"out_weight shape {self.out_weight.shape} != {(c, h * dk)}")
        if self.out_bias.shape != (c,):
            raise ValueError(f"out_bias shape {self.out_bias.shape} != {(c,)}")

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        """Named tensors in canonical checkpoint order."""
        out = [("prototypes", self.prototypes)]
        out += [(f"wq.{i}", w) for i, w in enumerate(self.wq)]
        out += [(f"wk.{i}", w) for i, w in enumerate(self.wk)]
        out += [("out_weight", self.out_weight), ("out_bias", self.out_bias)]
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            prototypes=self.prototypes.copy(),
            wq=[w.copy() for w in self.wq],
            wk=[w.copy() for w in self.wk],
            out_weight=self.out_weight.copy(),
            out_bias=self.out_bias.copy(),
        )


@dataclass
class HeadTrace:
    """Everything one head computed for one input."""

    head_index: int
    query: np.ndarray             # (d_k,)
    keys: np.ndarray              # (M, d_k)
    sims: np.ndarray              # (M,)
    alphas: np.ndarray            # (M,)
    neighborhood: np.ndarray      # sorted prototype indices with alpha > tau
    gammas: np.ndarray            # normalized weights, aligned with neighborhood
    mixed: np.ndarray             # (d_k,) weighted key mixture
    fallback_used: bool


@dataclass
class ForwardTrace:
    heads: list[HeadTrace]
    concat: np.ndarray            # (H * d_k,)
    logits: np.ndarray            # (C,)
    probs: np.ndarray             # (C,)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable sigmoid clamped into the open interval (0, 1)."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _ALPHA_FLOOR, _ALPHA_CEIL)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction. Works on 1-D or 2-D input."""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def init_params(config: ModelConfig, train_embeddings: np.ndarray | None = None,
                rng: np.random.Generator | None = None) -> ModelParams:
    """Initialize parameters, deterministic given the seed.

    Transforms get Glorot-uniform entries (bound sqrt(6/(fan_in+fan_out))),
    the output bias is zero. Prototypes are either M distinct training rows
    drawn without replacement ("sample") or i.i.d. N(0, 0.02^2) ("gaussian").
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    m, d = config.num_prototypes, config.dim
    h, dk, c = config.num_heads, config.head_dim, config.num_classes

    if config.prototype_init == "sample":
        if train_embeddings is None:
            raise ValueError("prototype_init='sample' requires train_embeddings")
        rows = np.asarray(train_embeddings, dtype=np.float64)
        if rows.shape[0] < m:
            raise ValueError(
                f"prototype_init='sample' needs >= {m} training rows, have {rows.shape[0]}")
        if rows.shape[1] != d:
            raise ValueError(f"train_embeddings dim {rows.shape[1]} != config dim {d}")
        chosen = rng.choice(rows.shape[0], size=m, replace=False)
        prototypes = rows[chosen].copy()
    else:
        prototypes = rng.normal(0.0, 0.02, size=(m, d))

    def glorot(shape, fan_in, fan_out):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)

    wq = [glorot((dk, d), d, dk) for _ in range(h)]
    wk = [glorot((dk, d), d, dk) for _ in range(h)]
    out_weight = glorot((c, h * dk), h * dk, c)
    out_bias = np.zeros(c, dtype=np.float64)

    params = ModelParams(prototypes=prototypes, wq=wq, wk=wk,
                         out_weight=out_weight, out_bias=out_bias)
    params.check_shapes(config)
    return params


def head_forward(params: ModelParams, config: ModelConfig, s: np.ndarray,
                 head: int) -> HeadTrace:
    """Run one attention head over input s, recording every intermediate."""
    s = np.asarray(s, dtype=np.float64)
    q = params.wq[head] @ s                       # (d_k,)
    keys = params.prototypes @ params.wk[head].T  # (M, d_k)
    sims = keys @ q / config.head_dim             # (M,)
    alphas = sigmoid(sims)

    neighborhood = np.flatnonzero(alphas > config.threshold)
    fallback_used = neighborhood.size == 0
    if fallback_used:
        neighborhood = np.array([int(np.argmax(alphas))])
    gammas = alphas[neighborhood] / alphas[neighborhood].sum()
    mixed = gammas @ keys[neighborhood]

    return HeadTrace(head_index=head, query=q, keys=keys, sims=sims,
                     alphas=alphas, neighborhood=neighborhood, gammas=gammas,
                     mixed=mixed, fallback_used=fallback_used)


def forward(params: ModelParams, config: ModelConfig, s: np.ndarray) -> ForwardTrace:
    """Full forward pass over all heads for a single input embedding."""
    heads = [head_forward(params, config, s, i) for i in range(config.num_heads)]
    concat = np.concatenate([h.mixed for h in heads])
    logits = params.out_weight @ concat + params.out_bias
    probs = softmax(logits)
    return ForwardTrace(heads=heads, concat=concat, logits=logits, probs=probs)


def predict(params: ModelParams, config: ModelConfig,
            s: np.ndarray) -> tuple[int, np.ndarray]:
    """Predicted class (argmax of probs, ties to the lowest index) and probs."""
    trace = forward(params, config, s)
    return int(np.argmax(trace.probs)), trace.probs


@dataclass
class BatchTrace:
    """Vectorized forward over a batch, kept for the backward pass.

    Per head i: queries Q[i] (n, d_k), keys K[i] (M, d_k), alphas (n, M),
    membership mask (n, M), dense gammas (n, M) with zeros outside the
    neighborhood, and the per-row score sums A (n,).
    """

    queries: list[np.ndarray]
    keys: list[np.ndarray]
    alphas: list[np.ndarray]
    masks: list[np.ndarray]
    fallbacks: list[np.ndarray]   # (n,) bool per head
    gammas: list[np.ndarray]
    denoms: list[np.ndarray]
    mixed: list[np.ndarray]       # (n, d_k) per head
    concat: np.ndarray            # (n, H * d_k)
    logits: np.ndarray            # (n, C)
    probs: np.ndarray             # (n, C)


def forward_batch(params: ModelParams, config: ModelConfig,
                  batch: np.ndarray) -> BatchTrace:
    """Forward pass over a (n, d) batch; semantics identical to `forward` per row."""
    S = np.asarray(batch, dtype=np.float64)
    queries, keys, alphas_all, masks, fallbacks, gammas_all, denoms, mixed_all = \
        [], [], [], [], [], [], [], []
    for i in range(config.num_heads):
        q = S @ params.wq[i].T                        # (n, d_k)
        k = params.prototypes @ params.wk[i].T        # (M, d_k)
        sims = q @ k.T / config.head_dim              # (n, M)
        alphas = sigmoid(sims)
        mask = alphas > config.threshold
        fallback = ~mask.any(axis=1)
        if fallback.any():
            rows = np.flatnonzero(fallback)
            mask[rows, np.argmax(alphas[rows], axis=1)] = True
        masked = np.where(mask, alphas, 0.0)
        denom = masked.sum(axis=1)
        gammas = masked / denom[:, None]
        mixed = gammas @ k
        queries.append(q)
        keys.append(k)
        alphas_all.append(alphas)
        masks.append(mask)
        fallbacks.append(fallback)
        gammas_all.append(gammas)
        denoms.append(denom)
        mixed_all.append(mixed)
    concat = np.concatenate(mixed_all, axis=1)
    logits = concat @ params.out_weight.T + params.out_bias
    probs = softmax(logits)
    return BatchTrace(queries=queries, keys=keys, alphas=alphas_all, masks=masks,
                      fallbacks=fallbacks, gammas=gammas_all, denoms=denoms,
                      mixed=mixed_all, concat=concat, logits=logits, probs=probs)


def predict_batch(params: ModelParams, config: ModelConfig,
                  batch: np.ndarray) -> np.ndarray:
    """Predicted class indices for a (n, d) batch."""
    return np.argmax(forward_batch(params, config, batch).probs, axis=1)


def save_checkpoint(params: ModelParams, config: ModelConfig, path) -> None:
    """Write a GAPC v1 checkpoint; tensors are rounded to float32."""
    params.check_shapes(config)
    config_json = json.dumps(config.to_dict(), sort_keys=True,
                             separators=(",", ":")).encode("utf-8")
    tensors = params.tensors()
    try:
        with open(path, "wb") as f:
            f.write(GAPC_MAGIC)
            f.write(struct.pack("<II", GAPC_VERSION, len(config_json)))
            f.write(config_json)
            f.write(struct.pack("<I", len(tensors)))
            for name, tensor in tensors:
                raw_name = name.encode("utf-8")
                f.write(struct.pack("<I", len(raw_name)))
                f.write(raw_name)
                f.write(struct.pack("<I", tensor.ndim))
                f.write(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
                f.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    except OSError as e:
        raise DataFormatError(f"cannot write {path}: {e}") from e


def _expected_tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    m, d = config.num_prototypes, config.dim
    h, dk, c = config.num_heads, config.head_dim, config.num_classes
    shapes = {"prototypes": (m, d), "out_weight": (c, h * dk), "out_bias": (c,)}
    for i in range(h):
        shapes[f"wq.{i}"] = (dk, d)
        shapes[f"wk.{i}"] = (dk, d)
    return shapes


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    """Read a GAPC v1 checkpoint, validating names and shapes against its config."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataFormatError(f"cannot read {path}: {e}") from e

    if len(blob) < 4 or blob[:4] != GAPC_MAGIC:
        raise DataFormatError(f"{path}: not a GAPC checkpoint (bad magic)")

    def need(n, what):
        if offset + n > len(blob):
            raise DataFormatError(f"{path}: truncated checkpoint (reading {what})")

    offset = 4
    need(8, "header")
    version, config_len = struct.unpack_from("<II", blob, offset)
    offset += 8
    if version != GAPC_VERSION:
        raise DataFormatError(f"{path}: unsupported GAPC version {version}")
    need(config_len, "config")
    try:
        config_dict = json.loads(blob[offset:offset + config_len].decode("utf-8"))
        config = ModelConfig(**config_dict)
    except (ValueError, TypeError) as e:
        raise DataFormatError(f"{path}: invalid checkpoint config: {e}") from e
    offset += config_len

    expected = _expected_tensor_shapes(config)
    need(4, "tensor count")
    (tensor_count,) = struct.unpack_from("<I", blob, offset)
    offset += 4

    loaded: dict[str, np.ndarray] = {}
    for _ in range(tensor_count):
        need(4, "tensor name length")
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        need(name_len, "tensor name")
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        if name not in expected:
            raise DataFormatError(f"{path}: unexpected tensor {name!r} in checkpoint")
        if name in loaded:
            raise DataFormatError(f"{path}: duplicate tensor {name!r} in checkpoint")
        need(4, "tensor rank")
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        need(8 * rank, "tensor dims")
        dims = struct.unpack_from(f"<{rank}Q", blob, offset)
        offset += 8 * rank
        if tuple(dims) != expected[name]:
            raise DataFormatError(
                f"{path}: tensor {name!r} has shape {tuple(dims)}, "
                f"config requires {expected[name]}")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        need(4 * size, f"tensor {name!r} data")
        data = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
        offset += 4 * size
        loaded[name] = data.astype(np.float64).reshape(dims)

    missing = sorted(set(expected) - set(loaded))
    if missing:
        raise DataFormatError(f"{path}: checkpoint is missing tensors {missing}")

    params = ModelParams(
        prototypes=loaded["prototypes"],
        wq=[loaded[f"wq.{i}"] for i in range(config.num_heads)],
        wk=[loaded[f"wk.{i}"] for i in range(config.num_heads)],
        out_weight=loaded["out_weight"],
        out_bias=loaded["out_bias"],
    )
    params.check_shapes(config)
    return params, config
