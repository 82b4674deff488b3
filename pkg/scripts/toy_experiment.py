"""Desk-scale experiment: simulate a toy corpus, train, and compare against bounds.

Usage::

    python3 scripts/toy_experiment.py --work /tmp/toy --steps 300 --lr 3e-3 --lambda 10

Prints the smoothed L1 trajectory and corpus-mean SRMR / LSD / SI-SDR for
the passthrough lower bound, the oracle-mask upper bound, the trained
model offline, and the online engine at chunk sizes 10, 20 and 40.
"""
import argparse
import time
from pathlib import Path

import numpy as np

from dereverb.cli import _oracle
from dereverb.dataset import (
    CorpusSpec,
    augment_clean_identity,
    build_corpus,
    make_synthetic_clean,
    read_manifest,
    rooms_from_names,
)
from dereverb.dsp import read_wav
from dereverb.engine import ChunkConfig, dereverb_offline, dereverb_stream
from dereverb.metrics import log_spectral_distance, si_sdr, srmr
from dereverb.models import ModelConfig
from dereverb.training import TrainConfig, Trainer, load_pairs


def corpus(work: Path, n_clean: int, duration: float):
    if not (work / "train" / "manifest.jsonl").exists():
        make_synthetic_clean(n_clean, duration, seed=1, out_dir=work / "clean_train")
        make_synthetic_clean(n_clean, duration, seed=2, out_dir=work / "clean_test")
        build_corpus(CorpusSpec(str(work / "clean_train"), rooms_from_names("A,B,C"), (0.0, 0.7), seed=3),
                     work / "train")
        build_corpus(CorpusSpec(str(work / "clean_test"), rooms_from_names("D,E"), (0.07, 0.6), seed=4,
                                split="test"), work / "test")
    return read_manifest(work / "train" / "manifest.jsonl"), read_manifest(work / "test" / "manifest.jsonl")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--work", default="/tmp/dereverb_toy")
    p.add_argument("--clean", type=int, default=10)
    p.add_argument("--duration", type=float, default=3.0)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--scale", default="1/8")
    p.add_argument("--mode", choices=("gat", "mse_baseline"), default="gat")
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--lambda", dest="lam", type=float, default=10.0)
    p.add_argument("--identity-fraction", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    train, test = corpus(Path(args.work), args.clean, args.duration)
    if args.identity_fraction:
        train = augment_clean_identity(train, args.identity_fraction, seed=args.seed)
    cfg = TrainConfig(lr=args.lr, lambda_l1=args.lam, epochs=10**6, max_steps=args.steps, seed=args.seed,
                      loss_mode=args.mode)
    trainer = Trainer(ModelConfig.at_scale(args.scale), cfg)
    t0 = time.perf_counter()
    trainer.run(load_pairs(train))
    smooth = trainer.log.smoothed("l1", 30)
    print(f"trained {trainer.step} steps on {len(train)} pairs in {time.perf_counter() - t0:.0f} s")
    print("smoothed L1:", " ".join(f"{v:.4f}" for v in smooth[::max(1, len(smooth) // 10)]),
          f"(end/start {smooth[-1] / smooth[0]:.3f})")

    gen = trainer.gen
    systems = {
        "passthrough": lambda c, r: r,
        "oracle": _oracle,
        "model": lambda c, r: dereverb_offline(r, gen),
        **{f"online{k}": (lambda c, r, k=k: dereverb_stream(r, gen, ChunkConfig(k))) for k in (10, 20, 40)},
        "clean_input": lambda c, r: dereverb_offline(c, gen),
    }
    rows = {k: [] for k in systems}
    for e in test:
        clean, reverb = read_wav(e.clean_path), read_wav(e.reverb_path)
        for k, f in systems.items():
            out = f(clean, reverb)
            rows[k].append((srmr(out), log_spectral_distance(clean, out), si_sdr(clean, out)))
    print(f"{'system':12s} {'SRMR':>7s} {'LSD':>7s} {'SI-SDR':>7s}")
    for k, v in rows.items():
        m = np.mean(v, axis=0)
        print(f"{k:12s} {m[0]:7.3f} {m[1]:7.3f} {m[2]:7.2f}")


if __name__ == "__main__":
    main()
