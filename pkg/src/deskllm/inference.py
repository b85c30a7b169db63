"""Generation with a KV cache, 4-bit group quantization, throughput measurement.

Quantization is asymmetric round-to-nearest over groups of consecutive
weights (per output channel, along the input dimension)::

    scale = (max - min) / 15,  zero = round(-min / scale)
    code  = clip(round(w / scale) + zero, 0, 15),  w' = (code - zero) * scale

A group that does not straddle zero is widened to include it so the zero
point stays a valid 4-bit code. Embeddings and norm gains are exempt and
kept as float16.
"""

from __future__ import annotations

import json
import logging
import math
import os
import platform
import statistics
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import KVCache, Llama, ModelConfig, param_shapes
from .tensor import Tensor

log = logging.getLogger(__name__)

QUANT_MAGIC = b"TTLQ"
QUANT_VERSION = 1
CODE_MAX = 15


# -- generation -----------------------------------------------------------


@dataclass
class GenerationParams:
    max_new_tokens: int = 32
    temperature: float = 0.0
    top_k: int | None = None
    seed: int = 0
    stop_ids: Sequence[int] = ()

    def validate(self, vocab_size: int) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.top_k is not None and not 1 <= self.top_k <= vocab_size:
            raise ValueError(f"top_k must lie in [1, {vocab_size}]")


def _choose(logits: np.ndarray, params: GenerationParams, rng: np.random.Generator) -> int:
    logits = logits.astype(np.float64)
    if params.temperature == 0:
        return int(np.argmax(logits))
    z = logits / params.temperature
    if params.top_k is not None and params.top_k < z.size:
        keep = np.argsort(-z, kind="stable")[: params.top_k]
        masked = np.full_like(z, -np.inf)
        masked[keep] = z[keep]
        z = masked
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(z.size, p=p))


def generate(model: Llama, prompt_ids: Sequence[int], params: GenerationParams, use_cache: bool = True) -> list[int]:
    """Continue ``prompt_ids``; returns only the new tokens."""
    cfg = model.config
    params.validate(cfg.vocab_size)
    tokens = [int(t) for t in prompt_ids]
    if not tokens:
        raise ValueError("prompt is empty")
    ctx = cfg.context_length
    if len(tokens) > ctx:
        log.warning("prompt of %d tokens exceeds context %d; keeping the last %d", len(tokens), ctx, ctx)
        tokens = tokens[-ctx:]
    rng = np.random.default_rng(params.seed)
    out: list[int] = []
    cache = None
    warned = False
    with T.no_grad():
        for _ in range(params.max_new_tokens):
            if use_cache:
                if cache is None or cache.length + 1 > ctx:
                    window = tokens[-ctx:]
                    if cache is not None and not warned:
                        log.warning("context full; re-encoding the last %d tokens", ctx)
                        warned = True
                    cache = KVCache(cfg.n_layers)
                    logits = model.forward(window, cache=cache).data[-1]
                else:
                    logits = model.forward(tokens[-1:], cache=cache).data[-1]
            else:
                logits = model.forward(tokens[-ctx:]).data[-1]
            nxt = _choose(logits, params, rng)
            tokens.append(nxt)
            out.append(nxt)
            if nxt in params.stop_ids:
                break
    return out


# -- quantization ---------------------------------------------------------


@dataclass
class QuantizedMatrix:
    shape: tuple[int, int]  # logical [in, out]
    group_size: int
    codes: np.ndarray  # uint8, two 4-bit codes per byte, low nibble first
    scales: np.ndarray  # float32 [n_groups]
    zeros: np.ndarray  # uint8 [n_groups]
    _dense: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_elements(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def nbytes(self) -> int:
        return self.codes.nbytes + self.scales.nbytes + self.zeros.nbytes

    def unpacked_codes(self) -> np.ndarray:
        lo = self.codes & 0x0F
        hi = self.codes >> 4
        return np.stack([lo, hi], axis=1).reshape(-1)

    def dequantize(self) -> np.ndarray:
        if self._dense is None:
            n_in, n_out = self.shape
            codes = self.unpacked_codes()[: self.scales.size * self.group_size].reshape(-1, self.group_size)
            vals = (codes.astype(np.float32) - self.zeros[:, None].astype(np.float32)) * self.scales[:, None]
            self._dense = np.ascontiguousarray(vals.reshape(-1)[: n_in * n_out].reshape(n_out, n_in).T)
        return self._dense


def _group_params(groups: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mn, mx = groups.min(axis=1), groups.max(axis=1)
    lo, hi = np.minimum(mn, 0.0), np.maximum(mx, 0.0)
    scale = ((hi - lo) / CODE_MAX).astype(np.float32)
    const = mn == mx
    # constant groups are stored exactly: c = (1 - 0) * c or (0 - 1) * |c|
    scale = np.where(const, np.where(mn == 0, 1.0, np.abs(mn)), scale).astype(np.float32)
    s = scale.astype(np.float64)
    zero = np.clip(np.floor(-lo / s + 0.5), 0, CODE_MAX)
    zero = np.where(const, np.where(mn < 0, 1, 0), zero)
    return scale, zero.astype(np.uint8)


def quantize_matrix(w: np.ndarray, group_size: int = 128) -> QuantizedMatrix:
    if group_size < 2:
        raise ValueError("group_size must be >= 2")
    w = np.asarray(w)
    if w.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {w.shape}")
    flat = np.ascontiguousarray(w.T, dtype=np.float64).reshape(-1)
    pad = (-flat.size) % group_size
    if pad:
        # repeat the tail so the last group's min/max are unchanged
        flat = np.concatenate([flat, np.full(pad, flat[-1])])
    groups = flat.reshape(-1, group_size)
    scale, zero = _group_params(groups)
    s = scale.astype(np.float64)[:, None]
    codes = np.clip(np.floor(groups / s + 0.5) + zero[:, None], 0, CODE_MAX).astype(np.uint8).reshape(-1)
    if codes.size % 2:
        codes = np.concatenate([codes, np.zeros(1, np.uint8)])
    packed = (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)
    return QuantizedMatrix((int(w.shape[0]), int(w.shape[1])), group_size, packed, scale, zero)


def dequant_matmul(x: Tensor, q: QuantizedMatrix) -> Tensor:
    if x.shape[-1] != q.shape[0]:
        raise T.ShapeError(f"input dim {x.shape[-1]} does not match quantized matrix {q.shape}")
    return T.matmul(x, Tensor(q.dequantize().astype(x.dtype, copy=False)))


def _is_exempt(name: str, quantize_embeddings: bool) -> bool:
    if name.endswith("norm"):
        return True
    return name == "embed" and not quantize_embeddings


@dataclass
class QuantizedParams:
    config: ModelConfig
    group_size: int
    matrices: dict[str, QuantizedMatrix]
    exempt: dict[str, np.ndarray]  # float16
    tokenizer_fingerprint: str = ""

    def footprint_bytes(self) -> int:
        return sum(m.nbytes for m in self.matrices.values()) + sum(a.nbytes for a in self.exempt.values())

    def to_bytes(self) -> bytes:
        table, blobs, off = [], [], 0

        def add(arr: np.ndarray) -> list[int]:
            nonlocal off
            blob = np.ascontiguousarray(arr).tobytes()
            blobs.append(blob)
            off += len(blob)
            return [off - len(blob), len(blob)]

        for name in param_shapes(self.config):
            if name in self.exempt:
                a = self.exempt[name]
                table.append({"name": name, "kind": "f16", "shape": list(a.shape), "data": add(a.astype("<f2"))})
            elif name in self.matrices:
                m = self.matrices[name]
                table.append(
                    {
                        "name": name,
                        "kind": "q4",
                        "shape": list(m.shape),
                        "group_size": m.group_size,
                        "codes": add(m.codes),
                        "scales": add(m.scales.astype("<f4")),
                        "zeros": add(m.zeros),
                    }
                )
        meta = {
            "model_config": self.config.to_dict(),
            "group_size": self.group_size,
            "tokenizer_fingerprint": self.tokenizer_fingerprint,
            "tensors": table,
        }
        mb = json.dumps(meta, sort_keys=True).encode("utf-8")
        return QUANT_MAGIC + struct.pack("<IQ", QUANT_VERSION, len(mb)) + mb + b"".join(blobs)

    def save(self, path: str | Path) -> int:
        blob = self.to_bytes()
        Path(path).write_bytes(blob)
        return len(blob)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "QuantizedParams":
        if blob[:4] != QUANT_MAGIC:
            raise ValueError("not a quantized model file")
        version, mlen = struct.unpack_from("<IQ", blob, 4)
        if version != QUANT_VERSION:
            raise ValueError(f"unsupported quantized model version {version}")
        meta = json.loads(blob[16 : 16 + mlen])
        base = 16 + mlen

        def get(span, dtype):
            start, n = span
            return np.frombuffer(blob, dtype=dtype, count=n // np.dtype(dtype).itemsize, offset=base + start).copy()

        matrices, exempt = {}, {}
        for t in meta["tensors"]:
            if t["kind"] == "f16":
                exempt[t["name"]] = get(t["data"], "<f2").astype(np.float16).reshape(t["shape"])
            else:
                matrices[t["name"]] = QuantizedMatrix(
                    tuple(t["shape"]),
                    t["group_size"],
                    get(t["codes"], np.uint8),
                    get(t["scales"], "<f4").astype(np.float32),
                    get(t["zeros"], np.uint8),
                )
        return cls(
            ModelConfig.from_dict(meta["model_config"]),
            meta["group_size"],
            matrices,
            exempt,
            meta.get("tokenizer_fingerprint", ""),
        )

    @classmethod
    def load(cls, path: str | Path) -> "QuantizedParams":
        return cls.from_bytes(Path(path).read_bytes())


def quantize(
    model: Llama, group_size: int = 128, quantize_embeddings: bool = False, tokenizer_fingerprint: str = ""
) -> QuantizedParams:
    matrices, exempt = {}, {}
    for name, p in model.params.items():
        if _is_exempt(name, quantize_embeddings):
            exempt[name] = p.data.astype(np.float16)
        else:
            matrices[name] = quantize_matrix(p.data, group_size)
    return QuantizedParams(model.config, group_size, matrices, exempt, tokenizer_fingerprint)


def footprint_formula(config: ModelConfig, group_size: int = 128, quantize_embeddings: bool = False) -> int:
    """Payload bytes of a quantized model computed from shapes alone.

    4-bit codes (two per byte) + per group a float32 scale and a uint8 zero,
    exempt tensors at 2 bytes per element.
    """
    total = 0
    for name, shape in param_shapes(config).items():
        n = math.prod(shape)
        if _is_exempt(name, quantize_embeddings):
            total += 2 * n
        else:
            groups = -(-n // group_size)
            codes = groups * group_size
            total += -(-codes // 2) + groups * 5
    return total


class QuantizedLlama(Llama):
    """Same forward as :class:`Llama`, with projections read from 4-bit codes."""

    def __init__(self, qparams: QuantizedParams):
        self.config = qparams.config
        self.qparams = qparams
        self.params = {k: Tensor(v.astype(np.float32)) for k, v in qparams.exempt.items()}
        self.matrices = qparams.matrices
        if "embed" in self.matrices:
            # the lookup needs rows, so a quantized embedding is expanded once
            self.params["embed"] = Tensor(self.matrices["embed"].dequantize())

    def linear(self, x: Tensor, name: str) -> Tensor:
        if name in self.matrices:
            return dequant_matmul(x, self.matrices[name])
        return T.matmul(x, self.params[name])



# -- throughput -----------------------------------------------------------


def hardware_descriptor() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} x{os.cpu_count()} / {platform.python_implementation()} {platform.python_version()} / numpy {np.__version__}"


def model_footprint_bytes(model: Llama) -> int:
    if isinstance(model, QuantizedLlama):
        return model.qparams.footprint_bytes()
    return sum(p.data.nbytes for p in model.params.values())


def measure_throughput(
    model: Llama,
    prompt: Sequence[int],
    n_tokens: int,
    repetitions: int = 5,
    clock=time.perf_counter,
) -> dict:
    """Greedy-decode ``n_tokens`` tokens ``repetitions`` times and summarise tokens/s."""
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    rates, produced = [], []
    params = GenerationParams(max_new_tokens=n_tokens, temperature=0.0)
    for _ in range(repetitions):
        t0 = clock()
        out = generate(model, prompt, params)
        dt = clock() - t0
        produced.append(len(out))
        rates.append(len(out) / dt if dt > 0 else float("inf"))
    return {
        "n_tokens": n_tokens,
        "generated": produced,
        "repetitions": repetitions,
        "tokens_per_s": rates,
        "median": statistics.median(rates),
        "mean": statistics.fmean(rates),
        "variance": statistics.variance(rates) if len(rates) > 1 else 0.0,
        "stdev": statistics.stdev(rates) if len(rates) > 1 else 0.0,
        "footprint_bytes": model_footprint_bytes(model),
        "hardware": hardware_descriptor(),
    }
