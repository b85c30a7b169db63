"""Deterministic, resumable training loop (pre-training and prompt-masked SFT).

Batches are a pure function of (seed, step): sequence number ``g`` of the
run reads position ``g % n`` of the permutation for epoch ``g // n``, and
that permutation is seeded with ``(seed, epoch)``. Resuming therefore only
needs the step counter, the weights and the optimizer moments.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import PackedDataset, SFTDataset
from .model import Llama, ModelConfig, cross_entropy
from .optim import AdamW, clip_grad_norm, lr_at
from .telemetry import Telemetry

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TTLC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


# -- configuration --------------------------------------------------------

# (attribute, key as written in the config file, type)
_KEYS = [
    ("tokens_per_batch", "tokens per batch", int),
    ("total_steps", "total training steps", int),
    ("grad_accum_steps", "gradient accumulation steps", int),
    ("optimizer", "optimizer", str),
    ("peak_lr", "learning rate", float),
    ("adam_eps", "adam epsilon", float),
    ("adam_beta1", "adam beta 1", float),
    ("adam_beta2", "adam beta 2", float),
    ("weight_decay", "weight decay", float),
    ("scheduler", "scheduler type", str),
    ("warmup_steps", "warmup steps", int),
    ("gradient_checkpointing", "gradient checkpointing", bool),
    ("mixed_precision", "mixed precision", str),
    ("tf32", "tf32", bool),
    ("flash_attention", "flash attention 2", bool),
    ("epochs", "epochs", int),
    ("min_lr", "minimum learning rate", float),
    ("max_grad_norm", "max gradient norm", float),
    ("sequence_length", "sequence length", int),
    ("checkpoint_interval", "checkpoint interval", int),
    ("eval_interval", "evaluation interval", int),
    ("eval_fraction", "evaluation fraction", float),
    ("seed", "seed", int),
]
_BY_KEY = {key: (attr, typ) for attr, key, typ in _KEYS}


@dataclass
class TrainConfig:
    """Training hyperparameters.

    ``tokens_per_batch`` counts tokens per optimizer step, after
    accumulation. ``total_steps`` may be left unset when ``epochs`` is given;
    it is then derived from the dataset size. The precision/kernel keys are
    recorded for traceability only: this implementation always runs float32
    with plain attention.
    """

    tokens_per_batch: int = 8192
    total_steps: int | None = None
    grad_accum_steps: int = 1
    optimizer: str = "AdamW"
    peak_lr: float = 6e-4
    adam_eps: float = 1e-8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.01
    scheduler: str = "cosine"
    warmup_steps: int = 0
    gradient_checkpointing: bool = False
    mixed_precision: str = "no"
    tf32: bool = False
    flash_attention: bool = False
    epochs: int | None = None
    min_lr: float = 0.0
    max_grad_norm: float = 1.0
    sequence_length: int = 2048
    checkpoint_interval: int | None = None
    eval_interval: int | None = None
    eval_fraction: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if self.tokens_per_batch % (self.sequence_length * self.grad_accum_steps):
            raise ValueError(
                f"tokens per batch {self.tokens_per_batch} is not divisible by "
                f"sequence length {self.sequence_length} x accumulation {self.grad_accum_steps}"
            )
        if self.total_steps is None and self.epochs is None:
            raise ValueError("set either total training steps or epochs")
        if self.total_steps is not None and self.warmup_steps >= self.total_steps:
            raise ValueError("warmup steps must be fewer than total training steps")
        if self.optimizer.lower() != "adamw":
            raise ValueError(f"only AdamW is implemented, got {self.optimizer}")
        if self.scheduler.lower() != "cosine":
            raise ValueError(f"only the cosine schedule is implemented, got {self.scheduler}")

    @property
    def micro_batch_sequences(self) -> int:
        return self.tokens_per_batch // (self.sequence_length * self.grad_accum_steps)

    @property
    def sequences_per_step(self) -> int:
        return self.tokens_per_batch // self.sequence_length

    def lr_at(self, step: int) -> float:
        return lr_at(step, self.peak_lr, self.warmup_steps, self.total_steps, self.min_lr)

    def intermediate_checkpoints(self) -> int:
        if not self.checkpoint_interval or not self.total_steps:
            return 0
        return self.total_steps // self.checkpoint_interval

    def dumps(self) -> str:
        lines = []
        for attr, key, _ in _KEYS:
            v = getattr(self, attr)
            if v is None:
                continue
            lines.append(f"{key} = {_format_value(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "TrainConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            key = key.strip().lower()
            if not sep or key not in _BY_KEY:
                raise ValueError(f"line {lineno}: unknown setting {key!r}")
            attr, typ = _BY_KEY[key]
            values[attr] = _parse_value(raw.strip(), typ)
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def with_overrides(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        d.update(kw)
        return TrainConfig(**d)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "True" if v else "False"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw: str, typ):
    if typ is bool:
        if raw.lower() not in ("true", "false"):
            raise ValueError(f"expected True/False, got {raw!r}")
        return raw.lower() == "true"
    if typ is int:
        return int(float(raw.replace(",", "").replace("_", "")))
    if typ is float:
        return float(raw.replace(",", ""))
    return raw


PRESETS = ("ttl-160m", "ttl-460m", "ttl-sft")


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("deskllm").joinpath("presets", f"{name}.cfg").read_text(encoding="utf-8")


def load_preset(name: str) -> TrainConfig:
    return TrainConfig.loads(preset_text(name))


# -- losses ---------------------------------------------------------------


def sft_loss(logits: T.Tensor, targets, prompt_mask) -> T.Tensor:
    """Cross-entropy over completion positions only (``prompt_mask`` true = skip)."""
    weights = 1.0 - np.asarray(prompt_mask, dtype=logits.dtype)
    return cross_entropy(logits, targets, weights)


# -- checkpoints ----------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    step: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int
    telemetry: dict
    tokenizer_fingerprint: str = ""
    rng: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def to_bytes(self) -> bytes:
        arrays = [("param." + k, v) for k, v in self.params.items()]
        arrays += [("adam_m." + k, v) for k, v in self.adam_m.items()]
        arrays += [("adam_v." + k, v) for k, v in self.adam_v.items()]
        table, blobs, offset = [], [], 0
        for name, arr in arrays:
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            table.append([name, list(arr.shape), offset, len(blob)])
            blobs.append(blob)
            offset += len(blob)
        meta = {
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "step": self.step,
            "scheduler": {"step": self.step, "lr": self._lr()},
            "optimizer": {"t": self.adam_t},
            "rng": self.rng,
            "telemetry": self.telemetry,
            "tokenizer_fingerprint": self.tokenizer_fingerprint,
            "tensors": table,
        }
        meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        head = CHECKPOINT_MAGIC + struct.pack("<IQ", self.version, len(meta_blob))
        return head + meta_blob + b"".join(blobs)

    def _lr(self) -> float | None:
        tc = self.train_config
        if tc.total_steps is None or self.step > tc.total_steps:
            return None
        return tc.lr_at(self.step)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def from_bytes(cls, blob: bytes, expect_fingerprint: str | None = None) -> "Checkpoint":
        if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint file")
        version, mlen = struct.unpack_from("<IQ", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
        meta = json.loads(blob[16 : 16 + mlen].decode("utf-8"))
        fp = meta["tokenizer_fingerprint"]
        if expect_fingerprint and fp and fp != expect_fingerprint:
            raise FingerprintMismatch(
                f"checkpoint was trained with tokenizer {fp[:12]}..., not {expect_fingerprint[:12]}..."
            )
        base = 16 + mlen
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
        for name, shape, offset, nbytes in meta["tensors"]:
            kind, _, key = name.partition(".")
            arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=base + offset)
            groups[kind][key] = arr.astype(np.float32).reshape(shape)
        ckpt = cls(
            model_config=ModelConfig.from_dict(meta["model_config"]),
            train_config=TrainConfig(**meta["train_config"]),
            step=meta["step"],
            params=groups["param"],
            adam_m=groups["adam_m"],
            adam_v=groups["adam_v"],
            adam_t=meta["optimizer"]["t"],
            telemetry=meta["telemetry"],
            tokenizer_fingerprint=fp,
            rng=meta["rng"],
            version=version,
        )
        tc = ckpt.train_config
        if tc.total_steps is not None and ckpt.step > tc.total_steps:
            raise CheckpointError(f"checkpoint step {ckpt.step} is past total steps {tc.total_steps}")
        return ckpt

    @classmethod
    def load(cls, path: str | Path, expect_fingerprint: str | None = None) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes(), expect_fingerprint)


def save_checkpoint(trainer: "Trainer", path: str | Path) -> Checkpoint:
    ckpt = trainer.checkpoint()
    ckpt.save(path)
    return ckpt


def load_checkpoint(path: str | Path, expect_fingerprint: str | None = None) -> Checkpoint:
    return Checkpoint.load(path, expect_fingerprint)


# -- the loop -------------------------------------------------------------


def _decays(name: str) -> bool:
    # norm gains are exempt from weight decay
    return not name.endswith("norm")


class Trainer:
    def __init__(
        self,
        model: Llama,
        config: TrainConfig,
        train_data: PackedDataset | SFTDataset,
        eval_data: PackedDataset | SFTDataset | None = None,
        telemetry: Telemetry | None = None,
        tokenizer_fingerprint: str = "",
    ):
        if len(train_data) == 0:
            raise ValueError("training dataset is empty")
        if train_data.sequence_length != config.sequence_length:
            config = config.with_overrides(sequence_length=train_data.sequence_length)
        if config.total_steps is None:
            steps_per_epoch = math.ceil(len(train_data) / config.sequences_per_step)
            config = config.with_overrides(total_steps=config.epochs * steps_per_epoch)
        config.validate()
        self.model = model
        self.config = config
        self.train_data = train_data
        self.eval_data = eval_data
        self.telemetry = telemetry or Telemetry()
        self.tokenizer_fingerprint = tokenizer_fingerprint
        self.step = 0
        self.history: list[tuple[int, float]] = []
        self.eval_history: list[tuple[int, float]] = []
        self.optimizer = AdamW(
            self._param_arrays(),
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
            config.weight_decay,
            decay=_decays,
        )
        self._perm_cache: dict[int, np.ndarray] = {}

    def _param_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.model.params.items()}

    # -- data order --

    def _permutation(self, epoch: int) -> np.ndarray:
        perm = self._perm_cache.get(epoch)
        if perm is None:
            perm = np.random.default_rng([self.config.seed, epoch]).permutation(len(self.train_data))
            self._perm_cache = {epoch: perm}
        return perm

    def batch_indices(self, step: int) -> list[np.ndarray]:
        """Dataset rows for each micro-batch of optimizer step ``step``."""
        n = len(self.train_data)
        per_step = self.config.sequences_per_step
        rows = []
        for g in range(step * per_step, (step + 1) * per_step):
            rows.append(self._permutation(g // n)[g % n])
        rows = np.asarray(rows)
        return np.split(rows, self.config.grad_accum_steps)

    def micro_batches(self, step: int) -> list:
        out = []
        for idx in self.batch_indices(step):
            if isinstance(self.train_data, SFTDataset):
                out.append((self.train_data.tokens[idx], self.train_data.loss_mask[idx]))
            else:
                out.append((self.train_data.sequences[idx], None))
        return out

    # -- steps --

    def _loss(self, tokens: np.ndarray, mask) -> T.Tensor:
        logits = self.model(tokens[:, :-1])
        targets = tokens[:, 1:]
        if mask is None:
            return cross_entropy(logits, targets)
        return cross_entropy(logits, targets, mask)

    def train_step(self, micro_batches) -> tuple[float, int]:
        """One optimizer step over ``micro_batches``; gradients are averaged across them."""
        self.model.zero_grad()
        k = len(micro_batches)
        total, n_tokens = 0.0, 0
        for batch in micro_batches:
            tokens, mask = batch if isinstance(batch, tuple) else (batch, None)
            tokens = np.asarray(tokens)
            loss = self._loss(tokens, mask)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss {value} at step {self.step}")
            (loss * (1.0 / k)).backward()
            total += value
            n_tokens += tokens.size
        grads = {}
        for name, p in self.model.params.items():
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        clip_grad_norm(grads, self.config.max_grad_norm)
        self.optimizer.step(self._param_arrays(), grads, self.config.lr_at(self.step))
        self.step += 1
        return total / k, n_tokens

    def evaluate(self, data=None, max_sequences: int | None = None) -> float:
        """Perplexity over the eval split: exp of the mean per-token NLL."""
        data = self.eval_data if data is None else data
        if data is None or len(data) == 0:
            raise ValueError("no evaluation data")
        n = len(data) if max_sequences is None else min(len(data), max_sequences)
        bs = self.config.micro_batch_sequences
        nll, count = 0.0, 0.0
        with T.no_grad():
            for start in range(0, n, bs):
                sl = slice(start, min(start + bs, n))
                if isinstance(data, SFTDataset):
                    tokens, w = data.tokens[sl], data.loss_mask[sl]
                else:
                    tokens = data.sequences[sl]
                    w = np.ones((tokens.shape[0], tokens.shape[1] - 1), dtype=np.float32)
                logits = self.model(tokens[:, :-1])
                lp = T.log_softmax(logits).data
                picked = np.take_along_axis(lp, tokens[:, 1:, None].astype(np.int64), axis=-1)[..., 0]
                nll -= float((picked * w).sum(dtype=np.float64))
                count += float(w.sum(dtype=np.float64))
        return math.exp(nll / count)

    def run(
        self,
        until_step: int | None = None,
        checkpoint_dir: str | Path | None = None,
        log_interval: int | None = None,
    ) -> Telemetry:
        """Train up to ``until_step`` (default: total steps), evaluating and checkpointing on schedule."""
        cfg = self.config
        end = cfg.total_steps if until_step is None else min(until_step, cfg.total_steps)
        while self.step < end:
            step = self.step
            batches = self.micro_batches(step)
            self.telemetry.start()
            loss, n_tokens = self.train_step(batches)
            self.telemetry.stop()
            self.telemetry.add_tokens(n_tokens)
            self.history.append((self.step, loss))
            done = self.step
            is_eval = self.eval_data is not None and cfg.eval_interval and (
                done % cfg.eval_interval == 0 or done == cfg.total_steps
            )
            is_ckpt = checkpoint_dir is not None and cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0
            if is_eval:
                self.telemetry.start()
                ppl = self.evaluate()
                self.telemetry.stop()
                self.eval_history.append((done, ppl))
                self.telemetry.record(done, loss, ppl)
                log.info("step %d loss %.4f eval ppl %.3f", done, loss, ppl)
            elif is_ckpt or (log_interval and done % log_interval == 0):
                self.telemetry.record(done, loss)
                log.info("step %d loss %.4f", done, loss)
            if is_ckpt:
                path = Path(checkpoint_dir) / f"step-{done:08d}.ckpt"
                save_checkpoint(self, path)
                log.info("saved %s", path)
        return self.telemetry

    # -- state --

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model_config=self.model.config,
            train_config=self.config,
            step=self.step,
            params={k: v.copy() for k, v in self._param_arrays().items()},
            adam_m={k: v.copy() for k, v in self.optimizer.m.items()},
            adam_v={k: v.copy() for k, v in self.optimizer.v.items()},
            adam_t=self.optimizer.t,
            telemetry=self.telemetry.state_dict(),
            tokenizer_fingerprint=self.tokenizer_fingerprint,
            rng={"seed": self.config.seed, "epoch": (self.step * self.config.sequences_per_step) // len(self.train_data)},
        )

    @classmethod
    def from_checkpoint(
        cls,
        ckpt: Checkpoint,
        train_data,
        eval_data=None,
        telemetry: Telemetry | None = None,
    ) -> "Trainer":
        params = {k: T.Tensor(v.copy(), requires_grad=True, name=k) for k, v in ckpt.params.items()}
        model = Llama(ckpt.model_config, params)
        trainer = cls(model, ckpt.train_config, train_data, eval_data, telemetry, ckpt.tokenizer_fingerprint)
        trainer.step = ckpt.step
        trainer.optimizer.load_state_dict({"t": ckpt.adam_t, "m": ckpt.adam_m, "v": ckpt.adam_v})
        trainer.telemetry.load_state_dict(ckpt.telemetry)
        return trainer
