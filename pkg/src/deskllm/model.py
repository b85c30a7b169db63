"""Llama-style decoder: RMSNorm pre-norm, RoPE, grouped-query attention, SwiGLU.

Weights are stored input-major (``x @ W``) and there are no biases.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden_size: int
    intermediate_size: int
    context_length: int
    n_heads: int
    n_kv_heads: int
    n_layers: int
    vocab_size: int
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.hidden_size % self.n_heads:
            raise ConfigError("hidden_size must be divisible by n_heads")
        if self.n_kv_heads < 1 or self.n_heads % self.n_kv_heads:
            raise ConfigError("n_heads must be divisible by n_kv_heads")
        if self.context_length < 1:
            raise ConfigError("context_length must be >= 1")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim {self.head_dim} must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.head_dim * self.n_kv_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


MODEL_PRESETS = {
    "ttl-160m": ModelConfig(768, 3072, 2048, 12, 12, 12, 32000),
    "ttl-460m": ModelConfig(1024, 4096, 2048, 16, 16, 24, 32000),
    "toy": ModelConfig(64, 256, 64, 4, 2, 2, 512),
    "tiny": ModelConfig(16, 32, 8, 2, 1, 2, 11),
}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every weight tensor and its shape, in a fixed order."""
    c = config
    shapes: dict[str, tuple[int, ...]] = {"embed": (c.vocab_size, c.hidden_size)}
    for i in range(c.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (c.hidden_size,)
        shapes[p + "wq"] = (c.hidden_size, c.hidden_size)
        shapes[p + "wk"] = (c.hidden_size, c.kv_dim)
        shapes[p + "wv"] = (c.hidden_size, c.kv_dim)
        shapes[p + "wo"] = (c.hidden_size, c.hidden_size)
        shapes[p + "mlp_norm"] = (c.hidden_size,)
        shapes[p + "w_gate"] = (c.hidden_size, c.intermediate_size)
        shapes[p + "w_up"] = (c.hidden_size, c.intermediate_size)
        shapes[p + "w_down"] = (c.intermediate_size, c.hidden_size)
    shapes["final_norm"] = (c.hidden_size,)
    if not c.tie_embeddings:
        shapes["head"] = (c.hidden_size, c.vocab_size)
    return shapes


def param_count(config: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(config).values())


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    resid_std = 0.02 / math.sqrt(2 * max(config.n_layers, 1))
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("norm"):
            data = np.ones(shape)
        elif name.endswith(("wo", "w_down")):
            data = rng.normal(0.0, resid_std, shape)
        else:
            data = rng.normal(0.0, 0.02, shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


# -- building blocks ------------------------------------------------------


def rmsnorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    ms = T.mean(x * x, axis=-1, keepdims=True)
    return x / T.sqrt(ms + eps) * gain


def rope_apply(x: Tensor, positions, theta: float = 10000.0) -> Tensor:
    """Rotate ``x`` of shape [..., seq, heads, head_dim] by position."""
    cos, sin = T.rope_tables(np.asarray(positions), x.shape[-1], theta, x.dtype)
    return T.rotate_pairs(x, cos[:, None, :], sin[:, None, :])


def causal_mask(n_query: int, n_key: int, dtype=np.float32) -> np.ndarray:
    """Additive mask; query i sits at absolute position n_key - n_query + i."""
    q = np.arange(n_query)[:, None] + (n_key - n_query)
    k = np.arange(n_key)[None, :]
    return np.where(k <= q, 0.0, -np.inf).astype(dtype)


def swiglu_mlp(x: Tensor, w_gate, w_up, w_down, linear=None) -> Tensor:
    lin = linear or T.matmul
    return lin(T.silu(lin(x, w_gate)) * lin(x, w_up), w_down)


class KVCache:
    """Per-layer rotated keys and values seen so far, [batch, kv_heads, seq, head_dim]."""

    def __init__(self, n_layers: int):
        self.k: list[np.ndarray | None] = [None] * n_layers
        self.v: list[np.ndarray | None] = [None] * n_layers

    @property
    def length(self) -> int:
        return 0 if self.k[0] is None else self.k[0].shape[2]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.k[layer] is None:
            self.k[layer], self.v[layer] = k, v
        else:
            self.k[layer] = np.concatenate([self.k[layer], k], axis=2)
            self.v[layer] = np.concatenate([self.v[layer], v], axis=2)
        return self.k[layer], self.v[layer]


class Llama:
    """The decoder. ``params`` maps names from :func:`param_shapes` to tensors."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        missing = set(param_shapes(config)) - set(self.params)
        if missing:
            raise ConfigError(f"missing parameters: {sorted(missing)[:5]}")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "Llama":
        return Llama(
            self.config,
            {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()},
        )

    # overridden by the quantized model
    def linear(self, x: Tensor, name: str) -> Tensor:
        return T.matmul(x, self.params[name])

    def head_weight(self) -> Tensor:
        if self.config.tie_embeddings:
            return T.transpose(self.params["embed"])
        return self.params["head"]

    def attention(self, x: Tensor, layer: int, positions: np.ndarray, cache: KVCache | None = None) -> Tensor:
        """Grouped-query attention on x [batch, seq, hidden]."""
        c = self.config
        B, S, _ = x.shape
        p = f"layers.{layer}."
        hd, H, KV = c.head_dim, c.n_heads, c.n_kv_heads
        q = rope_apply(self.linear(x, p + "wq").reshape(B, S, H, hd), positions, c.rope_theta)
        k = rope_apply(self.linear(x, p + "wk").reshape(B, S, KV, hd), positions, c.rope_theta)
        v = self.linear(x, p + "wv").reshape(B, S, KV, hd)
        k = T.transpose(k, (0, 2, 1, 3))
        v = T.transpose(v, (0, 2, 1, 3))
        if cache is not None:
            kd, vd = cache.append(layer, k.data, v.data)
            k, v = Tensor(kd), Tensor(vd)
        n_key = k.shape[2]
        group = H // KV
        # heads h = g_kv * group + j share kv head g_kv
        q = T.transpose(q, (0, 2, 1, 3)).reshape(B, KV, group, S, hd)
        k = k.reshape(B, KV, 1, n_key, hd)
        v = v.reshape(B, KV, 1, n_key, hd)
        scores = T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(hd))
        probs = T.softmax_rows(scores, causal_mask(S, n_key, x.dtype))
        out = T.matmul(probs, v).reshape(B, H, S, hd)
        out = T.transpose(out, (0, 2, 1, 3)).reshape(B, S, c.hidden_size)
        return self.linear(out, p + "wo")

    def mlp(self, x: Tensor, layer: int) -> Tensor:
        p = f"layers.{layer}."
        return swiglu_mlp(
            x, p + "w_gate", p + "w_up", p + "w_down", linear=lambda h, name: self.linear(h, name)
        )

    def forward(self, tokens, cache: KVCache | None = None) -> Tensor:
        """Logits for token ids of shape [seq] or [batch, seq].

        With a cache, ``tokens`` continue the cached sequence.
        """
        c = self.config
        ids = np.asarray(tokens, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        start = cache.length if cache is not None else 0
        B, S = ids.shape
        if S < 1:
            raise ValueError("empty token sequence")
        if start + S > c.context_length:
            raise ValueError(f"sequence of {start + S} exceeds context length {c.context_length}")
        if ids.min() < 0 or ids.max() >= c.vocab_size:
            raise ValueError(f"token id out of range for vocab of {c.vocab_size}")
        positions = np.arange(start, start + S)
        x = T.embedding(self.params["embed"], ids)
        for i in range(c.n_layers):
            p = f"layers.{i}."
            x = x + self.attention(rmsnorm(x, self.params[p + "attn_norm"], c.norm_eps), i, positions, cache)
            x = x + self.mlp(rmsnorm(x, self.params[p + "mlp_norm"], c.norm_eps), i)
        x = rmsnorm(x, self.params["final_norm"], c.norm_eps)
        logits = T.matmul(x, self.head_weight()) if c.tie_embeddings else self.linear(x, "head")
        return logits.reshape(S, c.vocab_size) if squeeze else logits

    __call__ = forward


def cross_entropy(logits: Tensor, targets, weights: np.ndarray | None = None) -> Tensor:
    """Mean next-token NLL; ``weights`` (same shape as targets) selects positions."""
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ValueError(f"target id out of range for vocab of {V}")
    nll = -T.take_last(T.log_softmax(logits), targets)
    if weights is None:
        return T.mean(nll)
    w = np.asarray(weights, dtype=logits.dtype)
    total = float(w.sum())
    if total <= 0:
        raise ValueError("every position is masked out")
    return T.sum_(nll * Tensor(w)) * (1.0 / total)


def with_config(config: ModelConfig, **changes) -> ModelConfig:
    return replace(config, **changes)
