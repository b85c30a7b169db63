"""Command-line entry point: plan, tokenize, pack, train, evaluate, quantize, generate, report.

Exit status: 0 success, 1 runtime error, 2 usage error, 3 missing file,
4 fingerprint mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import inference as I
from . import planner, telemetry
from .manifest import MANIFEST_NAME, FileRef, MissingFile, RunManifest
from .model import MODEL_PRESETS, Llama, param_count, with_config
from .tensor import Tensor
from .tokenizer import TokenizerModel, benchmark_fertility, read_fixture_counts, train_bpe
from .trainer import (
    _BY_KEY,
    _KEYS,
    PRESETS,
    Checkpoint,
    FingerprintMismatch,
    TrainConfig,
    Trainer,
    _parse_value,
    load_preset,
)

log = logging.getLogger("deskllm")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_MISSING, EXIT_MISMATCH = 0, 1, 2, 3, 4

# model each training preset is meant for
PRESET_MODEL = {"ttl-160m": "ttl-160m", "ttl-460m": "ttl-460m", "ttl-sft": "ttl-460m"}


class UsageError(Exception):
    pass


# -- helpers --------------------------------------------------------------


def _number(text: str) -> float:
    try:
        return float(text.replace(",", "").replace("_", ""))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def _existing(path: str | Path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingFile(f"no such file: {path}")
    return p


def format_lr(x: float) -> str:
    """6e-4 -> '6.0e-4'."""
    mant, exp = f"{x:.1e}".split("e")
    return f"{mant}e{int(exp)}"


def summary_line(cfg: TrainConfig) -> str:
    parts = [f"lr {format_lr(cfg.peak_lr)}", f"warmup {cfg.warmup_steps:,}"]
    if cfg.total_steps is not None:
        parts.append(f"steps {cfg.total_steps:,}")
    if cfg.epochs is not None:
        parts.append(f"epochs {cfg.epochs}")
    parts.append(f"batch tokens {cfg.tokens_per_batch:,}")
    return ", ".join(parts)


def parse_overrides(items: list[str]) -> dict:
    """``key=value`` pairs using either config-file keys or attribute names."""
    by_attr = {attr: typ for attr, _, typ in _KEYS}
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        key = key.strip().lower()
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        if key in by_attr:
            attr, typ = key, by_attr[key]
        elif key in _BY_KEY:
            attr, typ = _BY_KEY[key]
        else:
            raise UsageError(f"unknown setting {key!r}")
        try:
            out[attr] = _parse_value(value.strip(), typ)
        except ValueError as exc:
            raise UsageError(f"bad value for {key!r}: {exc}") from None
    return out


def _config_sha(cfg: TrainConfig) -> str:
    return hashlib.sha256(cfg.dumps().encode("utf-8")).hexdigest()


def _load_tokenizer(path) -> TokenizerModel:
    return TokenizerModel.load(_existing(path))


def _load_checkpoint(path, expect_fingerprint: str | None = None) -> Checkpoint:
    p = _existing(path)
    if p.is_dir():
        found = sorted(p.glob("step-*.ckpt"))
        if not found:
            raise MissingFile(f"no checkpoints in {p}")
        p = found[-1]
    return Checkpoint.load(p, expect_fingerprint)


def _model_from_checkpoint(ckpt: Checkpoint) -> Llama:
    params = {k: Tensor(v, name=k) for k, v in ckpt.params.items()}
    return Llama(ckpt.model_config, params)


def _check_fingerprints(a: str, b: str, what: str) -> None:
    if a and b and a != b:
        raise FingerprintMismatch(f"{what}: tokenizer {a[:12]}... does not match {b[:12]}...")


def _read_pairs(path: Path) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            pairs.append((rec["prompt"], rec["completion"]))
        except (json.JSONDecodeError, KeyError) as exc:
            raise ValueError(f"{path}:{lineno}: expected a JSON object with prompt and completion ({exc})") from exc
    return pairs


def _load_train_data(path: Path, tokenizer: TokenizerModel | None, sequence_length: int):
    """A packed dataset file, or JSONL prompt/completion pairs for SFT."""
    if path.suffix == ".jsonl":
        if tokenizer is None:
            raise UsageError("SFT data (.jsonl) needs --tokenizer")
        return D.build_sft(tokenizer, _read_pairs(path), sequence_length), True
    expect = tokenizer.fingerprint() if tokenizer is not None else None
    ds = D.PackedDataset.load(path)
    _check_fingerprints(ds.tokenizer_fingerprint, expect or "", f"dataset {path}")
    return ds, False


def _split(ds, cfg: TrainConfig, eval_path, tokenizer):
    if eval_path is not None:
        ev, _ = _load_train_data(_existing(eval_path), tokenizer, cfg.sequence_length)
        return ds, ev
    try:
        return D.split_eval(ds, cfg.eval_fraction, cfg.seed)
    except D.DatasetError as exc:
        log.warning("no eval split: %s", exc)
        return ds, None


def _telemetry_from_args(args) -> telemetry.Telemetry:
    return telemetry.Telemetry(args.power_w, args.utilization, args.intensity, args.region)


def _lock(directory: Path):
    from filelock import FileLock, Timeout

    lock = FileLock(str(directory / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise RuntimeError(f"{directory} is in use by another training process") from None
    return lock


def _finish_run(trainer: Trainer, ckpt_dir: Path, manifest: RunManifest) -> None:
    final = ckpt_dir / f"step-{trainer.step:08d}.ckpt"
    if not final.exists():
        trainer.checkpoint().save(final)
    for p in sorted(ckpt_dir.glob("step-*.ckpt")):
        manifest.add_checkpoint(p)
    tel_path = ckpt_dir / "telemetry.csv"
    trainer.telemetry.log.save(tel_path)
    manifest.telemetry = FileRef.of(tel_path)
    manifest.save(ckpt_dir)
    print(f"step {trainer.step}: checkpoint {final}")
    print(
        f"tokens {trainer.telemetry.tokens:,}, energy {trainer.telemetry.energy_kwh:.6f} kWh, "
        f"emissions {trainer.telemetry.emissions_kg:.6f} kgCO2eq"
    )


# -- commands -------------------------------------------------------------


def cmd_plan(args) -> int:
    report = planner.plan(args.n_params, args.unique_tokens, args.ratio, target_tokens=args.target_tokens)
    print(report.render())
    return EXIT_OK


def cmd_tok_train(args) -> int:
    docs = []
    for f in args.corpus:
        docs.extend(D.read_documents(_existing(f)))
    tok = train_bpe(docs, args.vocab_size, min_frequency=args.min_frequency)
    print(f"vocab {tok.vocab_size} ({len(tok.merges)} merges), fingerprint {tok.fingerprint()}")
    if args.dry_run:
        print("dry run: tokenizer not written")
    else:
        tok.save(args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_tok_encode(args) -> int:
    tok = _load_tokenizer(args.tokenizer)
    text = args.text if args.text is not None else _existing(args.file).read_text(encoding="utf-8")
    print(" ".join(map(str, tok.encode(text, bos=args.bos, eos=args.eos))))
    return EXIT_OK


def cmd_tok_decode(args) -> int:
    tok = _load_tokenizer(args.tokenizer)
    sys.stdout.write(tok.decode(args.ids) + "\n")
    return EXIT_OK


def cmd_tok_bench(args) -> int:
    models = []
    for item in args.tokenizer or []:
        name, sep, path = item.partition("=")
        if not sep:
            raise UsageError(f"--tokenizer expects NAME=PATH, got {item!r}")
        models.append((name, _load_tokenizer(path)))
    fixtures, word_count = [], None
    if args.fixture:
        fixtures, word_count = read_fixture_counts(_existing(args.fixture))
    wordlist = _existing(args.wordlist).read_text(encoding="utf-8") if args.wordlist else None
    report = benchmark_fertility(models, wordlist, fixtures, word_count if wordlist is None else None)
    print(report.render(), end="")
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    return EXIT_OK


def cmd_data_pack(args) -> int:
    tok = _load_tokenizer(args.tokenizer)
    files = [_existing(f) for f in args.files]
    ds = D.build_dataset(tok, files, args.seq_len, args.min_chars, args.max_symbol_ratio)
    for entry in ds.manifest:
        print(f"{entry['file']}: {entry['documents']} documents, {entry['tokens']:,} tokens")
    print(f"{len(ds)} sequences of {args.seq_len} tokens ({ds.total_tokens:,} tokens, {ds.dropped_tokens} dropped)")
    if args.dry_run:
        print("dry run: dataset not written")
    else:
        ds.save(args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    if args.preset and args.config:
        raise UsageError("give either --preset or --config, not both")
    if args.preset:
        cfg = load_preset(args.preset)
    elif args.config:
        cfg = TrainConfig.load(_existing(args.config))
    else:
        raise UsageError("one of --preset or --config is required")
    overrides = parse_overrides(args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.with_overrides(**overrides) if overrides else cfg


def cmd_train(args) -> int:
    cfg = _train_config(args)
    model_name = args.model or PRESET_MODEL.get(args.preset or "", "toy")
    if model_name not in MODEL_PRESETS:
        raise UsageError(f"unknown model {model_name!r}; choose from {', '.join(MODEL_PRESETS)}")
    mcfg = MODEL_PRESETS[model_name]
    tok = _load_tokenizer(args.tokenizer) if args.tokenizer else None
    if tok is not None and tok.vocab_size != mcfg.vocab_size:
        log.info("model vocab set to the tokenizer's %d", tok.vocab_size)
        mcfg = with_config(mcfg, vocab_size=tok.vocab_size)

    print(f"{args.preset or args.config}: model {model_name} ({param_count(mcfg):,} parameters), seed {cfg.seed}")
    print(summary_line(cfg))
    if args.dry_run:
        print(cfg.dumps(), end="")
        if cfg.total_steps:
            print(f"planned tokens {cfg.total_steps * cfg.tokens_per_batch:,}")
        print("dry run: nothing written")
        return EXIT_OK
    if not args.data:
        raise UsageError("--data is required unless --dry-run")
    if not args.checkpoint_dir:
        raise UsageError("--checkpoint-dir is required unless --dry-run")

    data_path = _existing(args.data)
    ds, sft = _load_train_data(data_path, tok, cfg.sequence_length)
    if ds.sequence_length - 1 > mcfg.context_length:
        raise UsageError(f"sequences of {ds.sequence_length} exceed the model context of {mcfg.context_length}")
    train, ev = _split(ds, cfg.with_overrides(sequence_length=ds.sequence_length), args.eval_data, tok)
    fp = tok.fingerprint() if tok is not None else getattr(ds, "tokenizer_fingerprint", "")

    ckpt_dir = Path(args.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    lock = _lock(ckpt_dir)
    try:
        if (ckpt_dir / MANIFEST_NAME).exists() or any(ckpt_dir.glob("step-*.ckpt")):
            raise UsageError(f"{ckpt_dir} already holds a run; use `resume`")
        model = Llama(mcfg, seed=cfg.seed)
        trainer = Trainer(model, cfg, train, ev, _telemetry_from_args(args), fp)
        manifest = RunManifest(
            seed=cfg.seed,
            model={"name": model_name, **mcfg.to_dict()},
            train_config_sha256=_config_sha(trainer.config),
            tokenizer_fingerprint=fp,
            tokenizer=FileRef.of(args.tokenizer) if args.tokenizer else None,
            dataset=FileRef.of(data_path),
            eval_dataset=FileRef.of(args.eval_data) if args.eval_data else None,
            sft=sft,
        )
        manifest.save(ckpt_dir)
        trainer.run(args.steps, ckpt_dir, args.log_interval)
        _finish_run(trainer, ckpt_dir, manifest)
    finally:
        lock.release()
    return EXIT_OK


def cmd_resume(args) -> int:
    ckpt_path = _existing(args.checkpoint)
    ckpt_dir = ckpt_path if ckpt_path.is_dir() else ckpt_path.parent
    manifest = RunManifest.load(ckpt_dir)
    ckpt = _load_checkpoint(ckpt_path, manifest.tokenizer_fingerprint or None)
    tok = TokenizerModel.load(manifest.tokenizer.path) if manifest.tokenizer else None
    cfg = ckpt.train_config
    ds, _ = _load_train_data(Path(manifest.dataset.path), tok, cfg.sequence_length)
    ev_path = manifest.eval_dataset.path if manifest.eval_dataset else None
    train, ev = _split(ds, cfg, ev_path, tok)
    print(f"resuming at step {ckpt.step} of {cfg.total_steps}")
    print(summary_line(cfg))
    if args.dry_run:
        print("dry run: nothing written")
        return EXIT_OK
    lock = _lock(ckpt_dir)
    try:
        trainer = Trainer.from_checkpoint(ckpt, train, ev, _telemetry_from_args(args))
        trainer.run(args.steps, ckpt_dir, args.log_interval)
        _finish_run(trainer, ckpt_dir, manifest)
    finally:
        lock.release()
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    tok = _load_tokenizer(args.tokenizer) if args.tokenizer else None
    if tok is not None:
        _check_fingerprints(ckpt.tokenizer_fingerprint, tok.fingerprint(), "checkpoint")
    data, _ = _load_train_data(_existing(args.data), tok, ckpt.train_config.sequence_length)
    if isinstance(data, D.PackedDataset):
        _check_fingerprints(ckpt.tokenizer_fingerprint, data.tokenizer_fingerprint, "dataset")
    model = _model_from_checkpoint(ckpt)
    cfg = ckpt.train_config.with_overrides(sequence_length=data.sequence_length)
    trainer = Trainer(model, cfg, data, data)
    ppl = trainer.evaluate(max_sequences=args.max_sequences)
    print(f"step {ckpt.step}: perplexity {ppl:.4f} (loss {np.log(ppl):.4f}) over {len(data)} sequences")
    return EXIT_OK


def _inference_model(args):
    """(model, tokenizer fingerprint) from --checkpoint, --quantized or --model."""
    if getattr(args, "quantized", None):
        q = I.QuantizedParams.load(_existing(args.quantized))
        return I.QuantizedLlama(q), q.tokenizer_fingerprint
    if getattr(args, "checkpoint", None):
        ckpt = _load_checkpoint(args.checkpoint)
        return _model_from_checkpoint(ckpt), ckpt.tokenizer_fingerprint
    name = getattr(args, "model", None)
    if name:
        return Llama(MODEL_PRESETS[name], seed=args.seed), ""
    raise UsageError("give --checkpoint or --quantized")


def cmd_generate(args) -> int:
    tok = _load_tokenizer(args.tokenizer)
    model, fp = _inference_model(args)
    _check_fingerprints(fp, tok.fingerprint(), "model")
    params = I.GenerationParams(
        args.max_new_tokens, args.temperature, args.top_k, args.seed, stop_ids=(tok.eos_id,) if tok.eos_id is not None else ()
    )
    out = I.generate(model, tok.encode(args.prompt, bos=True), params)
    sys.stdout.write(args.prompt + tok.decode(out) + "\n")
    return EXIT_OK


def cmd_quantize(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    model = _model_from_checkpoint(ckpt)
    q = I.quantize(model, args.group_size, args.quantize_embeddings, ckpt.tokenizer_fingerprint)
    formula = I.footprint_formula(model.config, args.group_size, args.quantize_embeddings)
    dense = sum(p.data.size for p in model.params.values()) * 4
    print(f"footprint {q.footprint_bytes():,} bytes (formula {formula:,}; float32 {dense:,})")
    if args.dry_run:
        print("dry run: quantized model not written")
    else:
        size = q.save(args.out)
        print(f"wrote {args.out} ({size:,} bytes)")
    return EXIT_OK


def cmd_bench(args) -> int:
    model, _ = _inference_model(args)
    rng = np.random.default_rng(args.seed)
    n_prompt = min(args.prompt_tokens, model.config.context_length)
    prompt = rng.integers(0, model.config.vocab_size, size=n_prompt).tolist()
    result = I.measure_throughput(model, prompt, args.n_tokens, args.repetitions)
    print(
        f"{result['median']:.2f} tokens/s median over {args.repetitions} runs "
        f"(mean {result['mean']:.2f}, sd {result['stdev']:.2f}), footprint {result['footprint_bytes']:,} bytes"
    )
    print(result["hardware"])
    if args.json:
        Path(args.json).write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.telemetry:
        tlog = telemetry.TelemetryLog.load(_existing(args.telemetry))
    elif args.checkpoint:
        t = telemetry.Telemetry()
        t.load_state_dict(_load_checkpoint(args.checkpoint).telemetry)
        tlog = t.log
    else:
        raise UsageError("give --telemetry or --checkpoint")
    if args.intensity is not None:
        tlog = telemetry.with_intensity(tlog, args.intensity)
    print(telemetry.render_report(tlog), end="")
    if args.out and not args.dry_run:
        for p in telemetry.write_report(tlog, args.out):
            print(f"wrote {p}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------


def _add_telemetry_flags(p) -> None:
    p.add_argument("--power-w", type=float, default=400.0, help="average device draw in watts")
    p.add_argument("--utilization", type=float, default=1.0)
    p.add_argument("--intensity", type=float, default=telemetry.DEFAULT_INTENSITY, help="kgCO2eq per kWh")
    p.add_argument("--region", default=telemetry.DEFAULT_REGION)
    p.add_argument("--log-interval", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deskllm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("plan", help="compute-optimal token budget and predicted loss")
    p.add_argument("--n-params", type=_number, required=True)
    p.add_argument("--unique-tokens", type=_number, default=None, help="size of the available corpus")
    p.add_argument("--target-tokens", type=_number, default=None, help="planned tokens (default: optimal)")
    p.add_argument("--ratio", type=_number, default=planner.DEFAULT_TOKENS_PER_PARAM)
    p.set_defaults(func=cmd_plan)

    tok = sub.add_parser("tok", help="train, apply and benchmark tokenizers")
    tsub = tok.add_subparsers(dest="tok_command", required=True, metavar="ACTION")
    p = tsub.add_parser("train", help="learn a byte-level BPE vocabulary")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--min-frequency", type=int, default=2)
    p.add_argument("--out", default="tokenizer.txt")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_tok_train)
    p = tsub.add_parser("encode", help="print token ids")
    p.add_argument("--tokenizer", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--text")
    g.add_argument("--file")
    p.add_argument("--bos", action="store_true")
    p.add_argument("--eos", action="store_true")
    p.set_defaults(func=cmd_tok_encode)
    p = tsub.add_parser("decode", help="print the text for token ids")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("ids", nargs="+", type=int)
    p.set_defaults(func=cmd_tok_decode)
    p = tsub.add_parser("bench", help="tokens per word on a word list")
    p.add_argument("--wordlist")
    p.add_argument("--tokenizer", action="append", metavar="NAME=PATH")
    p.add_argument("--fixture", help="CSV of externally measured counts")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_tok_bench)

    dat = sub.add_parser("data", help="dataset preparation")
    dsub = dat.add_subparsers(dest="data_command", required=True, metavar="ACTION")
    p = dsub.add_parser("pack", help="tokenize and pack documents into fixed-length sequences")
    p.add_argument("files", nargs="+")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--seq-len", type=int, default=2048)
    p.add_argument("--min-chars", type=int, default=1)
    p.add_argument("--max-symbol-ratio", type=float, default=1.0)
    p.add_argument("--out", default="dataset.bin")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_data_pack)

    p = sub.add_parser("train", help="train from scratch")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    p.add_argument("--model", choices=sorted(MODEL_PRESETS))
    p.add_argument("--data", help="packed dataset, or .jsonl prompt/completion pairs for SFT")
    p.add_argument("--eval-data")
    p.add_argument("--tokenizer")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--steps", type=int, default=None, help="stop after this step (default: total)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dry-run", action="store_true")
    _add_telemetry_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("resume", help="continue a run from its latest or a given checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--dry-run", action="store_true")
    _add_telemetry_flags(p)
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("eval", help="perplexity of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tokenizer")
    p.add_argument("--max-sequences", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="continue a prompt")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--quantized")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new-tokens", type=int, default=32)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("quantize", help="4-bit group quantization of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="model.q4")
    p.add_argument("--group-size", type=int, default=128)
    p.add_argument("--quantize-embeddings", action="store_true")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("bench-throughput", help="greedy decoding speed")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--quantized")
    g.add_argument("--model", choices=sorted(MODEL_PRESETS), help="randomly initialised preset")
    p.add_argument("--n-tokens", type=int, default=32)
    p.add_argument("--prompt-tokens", type=int, default=8)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="write the full result as JSON")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="energy/emissions/perplexity report with charts")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--telemetry", help="telemetry CSV")
    g.add_argument("--checkpoint")
    p.add_argument("--intensity", type=float, default=None, help="recompute emissions for this grid")
    p.add_argument("--out", help="directory for report.txt, telemetry.csv and SVG charts")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FingerprintMismatch as exc:
        print(f"fingerprint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ValueError, RuntimeError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main() -> None:
    sys.exit(dispatch())
