"""Walk the two-stage pipeline on the synthetic corpus and look at the results.

    python3 demos/toy_pipeline.py [--steps 2000] [--stage2-steps 600]

Stage 1 trains the aligner, acoustic model and prosody learner.  Stage 2 fits
the prosody predictor to the learner's outputs.  The script then compares
reconstruction with and without prosody, and synthesises one sentence twice
in sample mode and twice in argmax mode.
"""

import argparse
import time

import numpy as np

from prosody_tts.corpus import synthetic_corpus
from prosody_tts.features import text_to_phonemes
from prosody_tts.model import ModelConfig, synthesize
from prosody_tts.prosody import StubWordEmbeddings
from prosody_tts.training import (
    duration_mae,
    extract_prosody_targets,
    mel_l1,
    stage1_train,
    stage2_train,
)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--stage2-steps", type=int, default=600)
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args()

    corpus = synthetic_corpus(50, 7, 0.8)
    config = ModelConfig.desk(steps=args.steps, stage2_steps=args.stage2_steps)
    print(f"corpus: {len(corpus.train)} train / {len(corpus.test)} held-out utterances")

    start = time.perf_counter()
    ckpt = stage1_train(corpus, config, workers=args.workers,
                        callback=lambda r: r["step"] % 250 == 0 and print(f"  step {r['step']:5d} loss {r['loss']:.4f}"))
    print(f"stage 1 done in {time.perf_counter() - start:.0f}s")
    model = ckpt.model
    print(f"  train mel L1      {mel_l1(model, corpus.train):.4f}")
    print(f"  held-out mel L1   {mel_l1(model, corpus.test):.4f}")
    print(f"  zero-prosody L1   {mel_l1(model, corpus.train, prosody='zero'):.4f}  (prosody removed)")
    print(f"  duration MAE      {duration_mae(model, corpus.utterances):.3f} frames")

    provider = StubWordEmbeddings(config.word_dim)
    targets = extract_prosody_targets(ckpt, corpus.train)
    stage2_train(ckpt, corpus.train, targets, provider, workers=args.workers)
    history = ckpt.history["stage2"]
    print(f"stage 2: prosody NLL {history[0]['nll']:.3f} -> {history[-1]['final_nll']:.3f}")

    seq = text_to_phonemes("1.2.3 4.5 6.7.8.9", inventory_size=config.n_symbols)
    for mode in ("sample", "argmax"):
        a, da, _ = synthesize(model, seq, provider, seed=1, mode=mode)
        b, db, _ = synthesize(model, seq, provider, seed=2, mode=mode)
        n = min(len(a), len(b))
        print(f"{mode:>6}: frames {len(a)} / {len(b)}, seed-to-seed mel L1 "
              f"{np.abs(a[:n] - b[:n]).mean():.4f}, durations {da.durations.tolist()}")


if __name__ == "__main__":
    main()
