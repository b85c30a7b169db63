import math
from importlib import resources

import numpy as np
import pytest

from deskllm import tensor as T
from deskllm.data import SFTDataset
from deskllm.model import MODEL_PRESETS, Llama, cross_entropy
from deskllm.telemetry import Telemetry
from deskllm.trainer import (
    PRESETS,
    Checkpoint,
    CheckpointError,
    FingerprintMismatch,
    TrainConfig,
    Trainer,
    load_checkpoint,
    load_preset,
    preset_text,
    save_checkpoint,
    sft_loss,
)
from deskllm.tensor import Tensor
from conftest import cycle_dataset

TOY = MODEL_PRESETS["toy"]


def toy_config(**kw) -> TrainConfig:
    base = dict(tokens_per_batch=256, total_steps=100, peak_lr=1e-3, warmup_steps=10, sequence_length=64)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def toy_data():
    ds = cycle_dataset(36, 64, 300, 512)
    return ds.subset(np.arange(32)), ds.subset(np.arange(32, 36))


# -- presets and config --


def test_presets_byte_match_committed_files():
    for name in PRESETS:
        committed = resources.files("deskllm").joinpath("presets", f"{name}.cfg").read_bytes()
        assert load_preset(name).dumps().encode("utf-8") == committed
        assert preset_text(name).encode("utf-8") == committed


def test_preset_values():
    c160, c460, sft = (load_preset(n) for n in PRESETS)
    assert (c160.peak_lr, c160.warmup_steps, c160.total_steps, c160.tokens_per_batch) == (6e-4, 5000, 458_000, 8192)
    assert (c460.peak_lr, c460.warmup_steps, c460.total_steps, c460.grad_accum_steps) == (3e-4, 10_000, 1_200_000, 2)
    assert (sft.peak_lr, sft.warmup_steps, sft.epochs, sft.total_steps) == (1e-5, 1000, 3, None)
    for cfg in (c160, c460, sft):
        assert (cfg.adam_eps, cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay) == (1e-8, 0.9, 0.999, 0.01)
        assert cfg.sequence_length == 2048 and cfg.mixed_precision == "bfloat16"
    text = preset_text("ttl-160m")
    for key in ("tokens per batch = 8192", "learning rate = 0.0006", "warmup steps = 5000", "adam epsilon = 1e-08"):
        assert key in text


def test_intermediate_checkpoints_and_token_budget():
    assert load_preset("ttl-160m").intermediate_checkpoints() == 20
    c460 = load_preset("ttl-460m")
    assert c460.total_steps * c460.tokens_per_batch == 9_830_400_000
    assert c460.intermediate_checkpoints() == 48


def test_config_round_trip_and_errors():
    cfg = toy_config(epochs=2, checkpoint_interval=5)
    assert TrainConfig.loads(cfg.dumps()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.loads("no such key = 3\n")
    with pytest.raises(ValueError):
        toy_config(tokens_per_batch=100).validate()
    with pytest.raises(ValueError):
        toy_config(total_steps=None).validate()
    with pytest.raises(ValueError):
        toy_config(optimizer="SGD").validate()


def test_sft_preset_steps_derived_from_epochs():
    data = SFTDataset(np.zeros((10, 8), np.int32), np.ones((10, 7), np.float32))
    cfg = load_preset("ttl-sft").with_overrides(tokens_per_batch=32, grad_accum_steps=1, warmup_steps=1)
    tr = Trainer(Llama(MODEL_PRESETS["tiny"]), cfg, data)
    # 4 sequences per step over 10 sequences is 3 steps per epoch
    assert tr.config.total_steps == 3 * 3


# -- losses --


def test_sft_loss_examples():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(3, 6)), dtype=np.float64)
    tgt = np.array([1, 4, 2])
    assert sft_loss(logits, tgt, np.zeros(3)).item() == pytest.approx(cross_entropy(logits, tgt).item(), rel=1e-12)
    lp = logits.data - np.log(np.exp(logits.data).sum(-1, keepdims=True))
    only = sft_loss(logits, tgt, np.array([1, 0, 1])).item()
    assert only == pytest.approx(-lp[1, 4], rel=1e-12)
    hand = -(lp[0, 1] + lp[2, 2]) / 2
    assert sft_loss(logits, tgt, np.array([0, 1, 0])).item() == pytest.approx(hand, rel=1e-12)


def test_fresh_model_loss_near_log_vocab(toy_data):
    tr = Trainer(Llama(TOY), toy_config(), *toy_data)
    loss, n = tr.train_step(tr.micro_batches(0))
    assert abs(loss - math.log(512)) / math.log(512) < 0.1
    assert n == 256


def test_nonfinite_loss_aborts(toy_data):
    model = Llama(TOY)
    model.params["head"].data[:] = np.nan
    tr = Trainer(model, toy_config(), *toy_data)
    with pytest.raises(FloatingPointError):
        tr.train_step(tr.micro_batches(0))


# -- determinism, accumulation, resume --


def test_same_seed_same_trajectory(toy_data):
    runs = []
    for _ in range(2):
        tr = Trainer(Llama(TOY, seed=3), toy_config(total_steps=15), *toy_data)
        tr.run()
        runs.append([l for _, l in tr.history])
    assert runs[0] == runs[1]


def test_batch_order_is_a_permutation_per_epoch(toy_data):
    tr = Trainer(Llama(TOY), toy_config(seed=9), *toy_data)
    epoch = np.concatenate([np.concatenate(tr.batch_indices(s)) for s in range(8)])
    assert sorted(epoch.tolist()) == list(range(32))
    again = Trainer(Llama(TOY), toy_config(seed=9), *toy_data)
    assert all(np.array_equal(a, b) for a, b in zip(tr.batch_indices(13), again.batch_indices(13)))
    other = Trainer(Llama(TOY), toy_config(seed=10), *toy_data)
    assert not np.array_equal(np.concatenate(tr.batch_indices(0)), np.concatenate(other.batch_indices(0)))


def _run_accum(data, accum, steps=10):
    model = Llama(TOY, seed=1)
    start = {k: p.data.copy() for k, p in model.params.items()}
    tr = Trainer(model, toy_config(grad_accum_steps=accum, total_steps=steps, warmup_steps=2), data)
    tr.run()
    deltas = {k: model.params[k].data - start[k] for k in start}
    return [l for _, l in tr.history], deltas


@pytest.mark.parametrize("accum", [2, 4])
def test_accumulation_matches_full_batch(toy_data, accum):
    loss1, d1 = _run_accum(toy_data[0], 1)
    lossk, dk = _run_accum(toy_data[0], accum)
    assert max(abs(a - b) for a, b in zip(loss1, lossk)) < 1e-5
    assert max(float(np.max(np.abs(d1[k] - dk[k]))) for k in d1) < 1e-4


def test_resume_is_bitwise_identical(tmp_path, toy_data, fake_clock):
    cfg = toy_config(eval_interval=25)
    full = Trainer(Llama(TOY, seed=2), cfg, *toy_data, telemetry=Telemetry(clock=fake_clock))
    full.run()

    first = Trainer(Llama(TOY, seed=2), cfg, *toy_data, telemetry=Telemetry(clock=fake_clock))
    first.run(until_step=50)
    path = tmp_path / "half.ckpt"
    save_checkpoint(first, path)
    del first
    resumed = Trainer.from_checkpoint(load_checkpoint(path), *toy_data, telemetry=Telemetry(clock=fake_clock))
    assert resumed.step == 50
    resumed.run()

    for k, p in full.model.params.items():
        assert p.data.tobytes() == resumed.model.params[k].data.tobytes(), k
    for k in full.optimizer.m:
        assert full.optimizer.m[k].tobytes() == resumed.optimizer.m[k].tobytes()
    assert full.telemetry.tokens == resumed.telemetry.tokens
    assert full.telemetry.elapsed_s == resumed.telemetry.elapsed_s
    assert full.telemetry.state_dict() == resumed.telemetry.state_dict()


def test_eval_cadence(toy_data):
    tr = Trainer(Llama(TOY), toy_config(total_steps=23, eval_interval=5), *toy_data)
    tr.run()
    assert [s for s, _ in tr.eval_history] == [5, 10, 15, 20, 23]
    assert [r.step for r in tr.telemetry.log.rows if r.perplexity is not None] == [5, 10, 15, 20, 23]


def test_periodic_checkpoints(tmp_path, toy_data):
    tr = Trainer(Llama(TOY), toy_config(total_steps=12, checkpoint_interval=5), *toy_data)
    tr.run(checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["step-00000005.ckpt", "step-00000010.ckpt"]


# -- checkpoint files --


def test_checkpoint_save_load_save_identical(tmp_path, toy_data):
    tr = Trainer(Llama(TOY), toy_config(total_steps=5, warmup_steps=1), *toy_data, tokenizer_fingerprint="ab" * 32)
    tr.run()
    a = tmp_path / "a.ckpt"
    save_checkpoint(tr, a)
    ck = load_checkpoint(a)
    b = tmp_path / "b.ckpt"
    ck.save(b)
    assert a.read_bytes() == b.read_bytes()
    assert ck.step == 5 and ck.adam_t == 5
    assert a.read_bytes()[:4] == b"TTLC"


def test_checkpoint_errors(tmp_path, toy_data):
    tr = Trainer(Llama(TOY), toy_config(total_steps=2, warmup_steps=1), *toy_data, tokenizer_fingerprint="ab" * 32)
    tr.run()
    blob = tr.checkpoint().to_bytes()
    with pytest.raises(FingerprintMismatch):
        Checkpoint.from_bytes(blob, expect_fingerprint="cd" * 32)
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"NOPE" + blob[4:])
    bumped = blob[:4] + (99).to_bytes(4, "little") + blob[8:]
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(bumped)


def test_sft_training_only_scores_completions():
    tiny = MODEL_PRESETS["tiny"]
    tokens = np.array([[1, 2, 3, 4, 5, 6, 7, 8]] * 4, np.int32)
    mask = np.zeros((4, 7), np.float32)
    mask[:, 4:] = 1
    data = SFTDataset(tokens, mask)
    cfg = toy_config(tokens_per_batch=32, sequence_length=8, total_steps=3, warmup_steps=1)
    model = Llama(tiny, seed=0)
    tr = Trainer(model, cfg, data)
    loss, _ = tr.train_step(tr.micro_batches(0))
    with T.no_grad():
        logits = Llama(tiny, seed=0)(tokens[:, :-1])
    ref = cross_entropy(logits, tokens[:, 1:], mask).item()
    assert loss == pytest.approx(ref, rel=1e-6)
