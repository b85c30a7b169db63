import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskllm import tensor as T
from deskllm.inference import (
    GenerationParams,
    QuantizedLlama,
    QuantizedParams,
    dequant_matmul,
    footprint_formula,
    generate,
    measure_throughput,
    quantize,
    quantize_matrix,
)
from deskllm.model import MODEL_PRESETS, Llama, ModelConfig, param_shapes
from deskllm.tensor import Tensor
from deskllm.trainer import TrainConfig, Trainer
from conftest import cycle_dataset, successor_cycle

TOY = MODEL_PRESETS["toy"]


@pytest.fixture(scope="module")
def trained_toy():
    model = Llama(TOY, seed=0)
    cfg = TrainConfig(tokens_per_batch=256, total_steps=150, peak_lr=1e-3, warmup_steps=20, sequence_length=64)
    Trainer(model, cfg, cycle_dataset(32, 64, 300, 512)).run()
    return model


def elementwise_bound(w, q):
    """Max |w - dequant(w)| minus half the owning group's scale, over every element."""
    flat = w.T.reshape(-1)
    err = np.abs(flat - q.dequantize().T.reshape(-1))
    half = np.repeat(q.scales.astype(np.float64) / 2, q.group_size)[: flat.size]
    return float(np.max(err - half * (1 + 1e-6) - 1e-12))


# -- quantization --


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.sampled_from([2, 8, 32, 128]), st.integers(0, 2**16), st.floats(1e-3, 1e3))
def test_reconstruction_error_within_half_scale(rows, cols, group, seed, spread):
    w = np.random.default_rng(seed).normal(scale=spread, size=(rows, cols)).astype(np.float32)
    q = quantize_matrix(w, group)
    assert elementwise_bound(w.astype(np.float64), q) <= 0


def test_group_example_scale():
    w = np.array([[0.1, -0.2, 0.3, -0.4]]).T  # one column, one group of 4
    q = quantize_matrix(w, 4)
    assert q.scales[0] == pytest.approx(0.7 / 15, rel=1e-6)
    assert np.max(np.abs(q.dequantize() - w)) <= q.scales[0] / 2 + 1e-7


@pytest.mark.parametrize("c", [0.0, 0.37, -2.5])
def test_constant_group_is_exact(c):
    w = np.full((8, 4), c, dtype=np.float32)
    np.testing.assert_array_equal(quantize_matrix(w, 16).dequantize(), w)


def test_zero_matrix_gives_zero_output():
    q = quantize_matrix(np.zeros((6, 5), np.float32), 8)
    x = Tensor(np.random.default_rng(0).normal(size=(3, 6)).astype(np.float32))
    np.testing.assert_array_equal(dequant_matmul(x, q).data, 0.0)


def test_dequant_matmul_error_bound():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(64, 32)).astype(np.float32)
    x = rng.normal(size=(5, 64)).astype(np.float32)
    q = quantize_matrix(w, 32)
    out = dequant_matmul(Tensor(x), q).data
    # each output column mixes 64 weights, each off by at most half its group scale
    per_col_scale = q.scales.reshape(32, 2).max(axis=1)
    bound = np.abs(x).sum(-1, keepdims=True) * per_col_scale[None, :] / 2
    assert np.all(np.abs(out - x @ w) <= bound * (1 + 1e-5) + 1e-5)


def test_identity_like_matrix():
    w = np.eye(16, dtype=np.float32)
    q = quantize_matrix(w, 16)
    x = np.random.default_rng(2).normal(size=(3, 16)).astype(np.float32)
    out = dequant_matmul(Tensor(x), q).data
    assert np.max(np.abs(out - x)) <= np.abs(x).max() * q.scales.max() / 2 + 1e-6


def test_quantize_rejects_bad_input():
    with pytest.raises(ValueError):
        quantize_matrix(np.ones(4), 2)
    with pytest.raises(ValueError):
        quantize_matrix(np.ones((2, 2)), 1)
    with pytest.raises(T.ShapeError):
        dequant_matmul(Tensor(np.ones((1, 3))), quantize_matrix(np.ones((4, 2)), 2))


# -- footprint --


@pytest.mark.parametrize("quantize_embeddings", [False, True])
@pytest.mark.parametrize("preset", ["toy", "tiny"])
def test_reported_footprint_equals_formula(preset, quantize_embeddings):
    cfg = MODEL_PRESETS[preset]
    qp = quantize(Llama(cfg), quantize_embeddings=quantize_embeddings)
    assert qp.footprint_bytes() == footprint_formula(cfg, 128, quantize_embeddings)


def test_footprint_460m_per_layer_matches_formula():
    # one decoder layer of the real shape, measured by quantizing random weights
    big = MODEL_PRESETS["ttl-460m"]
    one_layer = ModelConfig(**{**big.to_dict(), "n_layers": 1})
    rng = np.random.default_rng(0)
    measured = 0
    for name, shape in param_shapes(one_layer).items():
        if name.startswith("layers.0.") and not name.endswith("norm"):
            measured += quantize_matrix(rng.standard_normal(shape, dtype=np.float32)).nbytes
    no_layers = ModelConfig(**{**big.to_dict(), "n_layers": 0})
    formula_layer = footprint_formula(one_layer, 128, True) - footprint_formula(no_layers, 128, True)
    norms = 2 * 2 * big.hidden_size
    assert measured == formula_layer - norms


def test_footprint_460m_near_reference_size():
    big = MODEL_PRESETS["ttl-460m"]
    with_emb = footprint_formula(big, 128, quantize_embeddings=True)
    assert abs(with_emb / 249e6 - 1) < 0.02
    # the default keeps the embedding at 16 bits and lands well above it
    assert footprint_formula(big, 128) > 1.1 * 249e6


# -- generation --


def test_greedy_cache_matches_no_cache(trained_toy):
    prompt = list(successor_cycle(300, 512)[:5])
    p = GenerationParams(max_new_tokens=90)  # runs past the 64-token context
    assert generate(trained_toy, prompt, p, use_cache=True) == generate(trained_toy, prompt, p, use_cache=False)


def test_trained_model_continues_the_cycle(trained_toy):
    cycle = successor_cycle(300, 512)
    out = generate(trained_toy, list(cycle[:10]), GenerationParams(max_new_tokens=20))
    assert out == list(cycle[10:30])


def test_top_k_one_equals_greedy():
    m = Llama(MODEL_PRESETS["tiny"], seed=4)
    greedy = generate(m, [1, 2, 3], GenerationParams(max_new_tokens=12))
    for seed in range(3):
        assert generate(m, [1, 2, 3], GenerationParams(max_new_tokens=12, temperature=1.3, top_k=1, seed=seed)) == greedy


def test_sampling_is_seeded():
    m = Llama(MODEL_PRESETS["tiny"], seed=4)
    p = GenerationParams(max_new_tokens=20, temperature=1.0, seed=7)
    assert generate(m, [1], p) == generate(m, [1], p)
    others = {tuple(generate(m, [1], GenerationParams(max_new_tokens=20, temperature=1.0, seed=s))) for s in range(5)}
    assert len(others) > 1


def test_stop_ids_and_errors():
    m = Llama(MODEL_PRESETS["tiny"], seed=4)
    first = generate(m, [1, 2], GenerationParams(max_new_tokens=5))[0]
    assert generate(m, [1, 2], GenerationParams(max_new_tokens=5, stop_ids=[first])) == [first]
    with pytest.raises(ValueError):
        generate(m, [], GenerationParams())
    with pytest.raises(ValueError):
        generate(m, [1], GenerationParams(temperature=-1))
    with pytest.raises(ValueError):
        generate(m, [1], GenerationParams(top_k=0))


def test_quantized_greedy_agreement(trained_toy):
    q = QuantizedLlama(quantize(trained_toy))
    prompt = list(successor_cycle(300, 512)[:8])
    p = GenerationParams(max_new_tokens=200)
    a, b = generate(trained_toy, prompt, p), generate(q, prompt, p)
    assert np.mean(np.array(a) == np.array(b)) >= 0.9


def test_quantized_file_round_trip(tmp_path, trained_toy):
    qp = quantize(trained_toy, tokenizer_fingerprint="ff" * 32)
    path = tmp_path / "m.ttlq"
    n = qp.save(path)
    assert path.read_bytes()[:4] == b"TTLQ" and n == path.stat().st_size
    back = QuantizedParams.load(path)
    assert back.tokenizer_fingerprint == "ff" * 32
    assert back.to_bytes() == qp.to_bytes()
    x = Tensor(np.random.default_rng(0).normal(size=(2, 64)).astype(np.float32))
    np.testing.assert_array_equal(
        dequant_matmul(x, back.matrices["layers.0.wq"]).data, dequant_matmul(x, qp.matrices["layers.0.wq"]).data
    )
    with pytest.raises(ValueError):
        QuantizedParams.from_bytes(b"XXXX" + qp.to_bytes()[4:])


def test_throughput_statistics(fake_clock):
    m = Llama(MODEL_PRESETS["tiny"], seed=0)
    stats = measure_throughput(m, [1, 2], 4, repetitions=5, clock=fake_clock)
    # each run reads the clock twice, so every run takes exactly one second
    assert stats["tokens_per_s"] == [4.0] * 5
    assert stats["median"] == stats["mean"] == 4.0 and stats["variance"] == 0.0
    assert stats["footprint_bytes"] == sum(p.data.nbytes for p in m.params.values())
    assert stats["hardware"]
    with pytest.raises(ValueError):
        measure_throughput(m, [1], 0)
