"""Command-line entry point: ``prosody-tts <command> ...``.

Metrics go to stdout as ``key=value`` lines; progress goes to stderr.
Exit codes: 0 success, 1 invalid input, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path


from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import (
    Corpus,
    Utterance,
    assign_splits,
    read_manifest,
    synthetic_corpus,
    write_manifest,
    write_melb,
)
from .errors import ProsodyTTSError, TrainingDivergedError
from .features import english_lexicon, read_wav, text_to_phonemes, wav_to_mel
from .model import ModelConfig, parse_config_text, synthesize, coerce_config_value, teacher_durations
from .prosody import StubWordEmbeddings
from .training import (
    dimension_sweep,
    duration_mae,
    extract_prosody_targets,
    mel_l1,
    prosody_nll,
    stage1_train,
    stage2_train,
    sweep_report,
)
from .verify import run_suites

log = logging.getLogger("prosody_tts")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def emit(**metrics) -> None:
    for key, value in metrics.items():
        if isinstance(value, float):
            value = f"{value:.6f}"
        print(f"{key}={value}")


# ---------------------------------------------------------------- prepare

def cmd_prepare(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        corpus = synthetic_corpus(args.count, args.seed, args.split)
    else:
        corpus = corpus_from_wav_dir(Path(args.wav_dir), args.split, args.seed)
    write_manifest(out / "manifest.jsonl", corpus)
    emit(manifest=out / "manifest.jsonl", utterances=len(corpus.utterances),
         train=len(corpus.train), test=len(corpus.test))
    return EXIT_OK


def corpus_from_wav_dir(root: Path, split: float, seed: int) -> Corpus:
    """Pair ``<id>.wav`` with ``<id>.txt`` transcripts; English character frontend."""
    if not root.is_dir():
        raise ProsodyTTSError(f"{root}: not a directory")
    lexicon = english_lexicon()
    wavs = sorted(root.glob("*.wav"))
    if not wavs:
        raise ProsodyTTSError(f"{root}: no .wav files")
    utts = []
    for wav in wavs:
        text_file = wav.with_suffix(".txt")
        if not text_file.exists():
            raise ProsodyTTSError(f"{wav}: missing transcript {text_file.name}")
        samples, rate = read_wav(wav)
        mel = wav_to_mel(samples, rate).values
        text = text_file.read_text(encoding="utf-8").strip()
        phonemes = text_to_phonemes(text, lexicon)
        if len(phonemes) > mel.shape[0]:
            raise ProsodyTTSError(f"{wav}: {len(phonemes)} symbols but only {mel.shape[0]} frames")
        utts.append(Utterance(wav.stem, phonemes, mel, text=text))
    splits = assign_splits([u.id for u in utts], split, seed)
    for u in utts:
        u.split = splits[u.id]
    return Corpus(utts, len(lexicon), mode="english", lexicon=lexicon)


# ------------------------------------------------------------------ train

def build_config(args, corpus: Corpus | None = None) -> ModelConfig:
    values = ModelConfig.preset(args.preset).to_dict()
    if args.config:
        values.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
    for item in args.set or []:
        key, _, value = item.partition("=")
        values[key.strip()] = coerce_config_value(key.strip(), value.strip())
    if args.seed is not None:
        values["seed"] = args.seed
    if corpus is not None:
        values["n_symbols"] = corpus.inventory_size
        values["frontend"] = corpus.mode
    return ModelConfig.from_dict(values)


def _progress(every: int):
    def cb(record):
        if record["step"] % every == 0:
            log.info("step %d loss %.5f", record["step"], record["loss"])
    return cb


def cmd_train(args) -> int:
    corpus = read_manifest(args.manifest)
    if args.stage == 1:
        config = build_config(args, corpus)
        ckpt = stage1_train(corpus, config, workers=args.workers, steps=args.steps,
                            fixed_durations=args.fixed_durations, callback=_progress(100))
        save_checkpoint(args.out, ckpt)
        emit(stage=1, steps=ckpt.step, final_loss=ckpt.history["stage1"][-1]["loss"],
             train_mel_l1=mel_l1(ckpt.model, corpus.train), checkpoint=args.out)
        return EXIT_OK
    if not args.checkpoint:
        raise ProsodyTTSError("stage 2 needs --checkpoint from stage 1")
    ckpt = load_checkpoint(args.checkpoint)
    missing = [u.id for u in corpus.train if u.prosody is None]
    if missing:
        raise ProsodyTTSError(f"utterance {missing[0]}: no prosody target; run extract-prosody first")
    targets = {u.id: u.prosody for u in corpus.train}
    provider = StubWordEmbeddings(ckpt.config.word_dim)
    ckpt = stage2_train(ckpt, corpus.train, targets, provider, steps=args.steps, workers=args.workers,
                        callback=_progress(100))
    save_checkpoint(args.out, ckpt)
    history = ckpt.history["stage2"]
    emit(stage=2, steps=len(history) - 2, initial_nll=history[0]["nll"], final_nll=history[-1]["final_nll"],
         checkpoint=args.out)
    return EXIT_OK


# -------------------------------------------------------- extract-prosody

def cmd_extract_prosody(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    corpus = read_manifest(args.manifest)
    targets = extract_prosody_targets(ckpt, corpus.utterances, "stored" if args.stored_durations else "viterbi")
    for u in corpus.utterances:
        u.prosody = targets[u.id]
        if u.durations is None:
            u.durations = teacher_durations(ckpt.model, u.phonemes, u.mel).durations
    out = Path(args.out) if args.out else Path(args.manifest)
    write_manifest(out, corpus)
    emit(manifest=out, utterances=len(targets), prosody_dim=ckpt.config.prosody_dim)
    return EXIT_OK


# ------------------------------------------------------------------ synth

def _phonemes_for(text: str, config: ModelConfig):
    if config.frontend == "english":
        return text_to_phonemes(text, english_lexicon(), config.n_symbols)
    return text_to_phonemes(text, None, config.n_symbols)


def cmd_synth(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    provider = StubWordEmbeddings(ckpt.config.word_dim)
    if args.text is not None:
        jobs = [("text", _phonemes_for(args.text, ckpt.config), Path(args.out))]
    else:
        corpus = read_manifest(args.manifest)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        utts = corpus.test or corpus.utterances
        jobs = [(u.id, u.phonemes, out_dir / f"{u.id}.melb") for u in utts]
    for name, phonemes, path in jobs:
        mel, align, _ = synthesize(ckpt.model, phonemes, provider, seed=args.seed, temperature=args.temperature,
                                   mode=args.mode, duration_scale=args.duration_scale)
        write_melb(path, mel)
        emit(utterance=name, phonemes=len(phonemes), frames=mel.shape[0], path=path)
    return EXIT_OK


# ----------------------------------------------------------- verify, eval

def cmd_verify(args) -> int:
    results = run_suites(args.suite)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    emit(checks=len(results), failed=failed)
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    corpus = read_manifest(args.manifest)
    utts = corpus.test or corpus.utterances
    model = ckpt.model
    metrics = {"split": "test" if corpus.test else "all", "utterances": len(utts),
               "mel_l1": mel_l1(model, utts), "zero_prosody_mel_l1": mel_l1(model, utts, prosody="zero")}
    if all(u.gt_durations is not None for u in utts):
        metrics["duration_mae"] = duration_mae(model, utts)
    if model.stage >= 2:
        targets = extract_prosody_targets(ckpt, utts)
        metrics["prosody_nll"] = prosody_nll(model, utts, targets)
    emit(**metrics)
    return EXIT_OK


def cmd_sweep(args) -> int:
    corpus = read_manifest(args.manifest)
    config = build_config(args, corpus)
    dims = [int(x) for x in args.dims.split(",")]
    report = sweep_report(dimension_sweep(corpus, dims, config, args.target_l1, workers=args.workers,
                                         max_steps=args.max_steps))
    sys.stdout.write(report)
    if args.report:
        Path(args.report).write_text(report, encoding="utf-8")
    return EXIT_OK


# ----------------------------------------------------------------- parser

def _config_flags(p) -> None:
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)


class _Parser(argparse.ArgumentParser):
    """Usage errors are input validation failures, so they exit with 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="prosody-tts", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a corpus manifest and MELB files")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--wav-dir")
    src.add_argument("--synthetic", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--split", type=float, default=0.98)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--count", type=int, default=50, help="synthetic utterance count")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="stage-1 or stage-2 training")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="stage-1 checkpoint (stage 2 only)")
    p.add_argument("--steps", type=int)
    p.add_argument("--fixed-durations", action="store_true", help="use stored durations as the teacher alignment")
    _config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract-prosody", help="write learner outputs as stage-2 targets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="manifest to write (default: update in place)")
    p.add_argument("--stored-durations", action="store_true")
    p.set_defaults(func=cmd_extract_prosody)

    p = sub.add_parser("synth", help="text or manifest to MELB")
    p.add_argument("--checkpoint", required=True)
    what = p.add_mutually_exclusive_group(required=True)
    what.add_argument("--text")
    what.add_argument("--manifest")
    p.add_argument("--out", required=True, help="MELB file for --text, directory for --manifest")
    p.add_argument("--mode", choices=("argmax", "sample"), default="argmax")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--duration-scale", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("verify", help="run the self-check suites")
    p.add_argument("--suite", choices=("gradients", "attention", "alignment", "mdn", "all"), default="all")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("eval", help="held-out mel L1, duration MAE and prosody NLL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="stage-1 runs over several prosody widths")
    p.add_argument("--manifest", required=True)
    p.add_argument("--dims", default="1,3,6,10")
    p.add_argument("--target-l1", type=float, default=0.05)
    p.add_argument("--max-steps", type=int, help="per-width step cap (default: twice the configured steps)")
    p.add_argument("--report")
    _config_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ProsodyTTSError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
