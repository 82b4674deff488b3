"""Command-line entry point: simulate, train, dereverb, evaluate, inspect.

Exit codes: 0 ok, 1 data error, 2 usage error, 3 training diverged,
4 model/shape mismatch.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import SAMPLE_RATE
from .dataset import (
    CorpusSpec,
    augment_clean_identity,
    build_corpus,
    make_synthetic_clean,
    read_manifest,
    rooms_from_names,
    worker_count,
    write_manifest,
)
from .dsp import StftConfig, Waveform, istft, read_wav, stft, to_mag_phase, write_wav
from .engine import ChunkConfig, OnlineSession, dereverb_offline, dereverb_stream, latency_report
from .masks import apply_mask, psm_target
from .metrics import MetricReport, score
from .models import ModelConfig
from .rir import RT60_RANGES
from .training import Diverged, TrainConfig, load_generator, train

log = logging.getLogger("dereverb")

EXIT_OK, EXIT_DATA, EXIT_USAGE, EXIT_DIVERGED, EXIT_MISMATCH = 0, 1, 2, 3, 4
RAW_BLOCK = 4096  # samples per read in raw stream mode


class UsageError(Exception):
    pass


def _rt60_range(text):
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi in seconds, got {text!r}")
    return lo, hi


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dereverb", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="build a reverberant/clean paired corpus")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--clean-dir")
    src.add_argument("--synthetic", type=_positive_int, metavar="N", help="generate N speech-like clean files")
    s.add_argument("--duration", type=float, default=3.0, help="seconds per synthetic file")
    s.add_argument("--rooms", help="room set name or comma list (default depends on split)")
    s.add_argument("--rt60", type=_rt60_range, help="lo:hi seconds (default depends on split)")
    s.add_argument("--split", choices=("train", "dev", "test"), default="train")
    s.add_argument("--pairs-per-clean", type=_positive_int, default=1)
    s.add_argument("--identity-fraction", type=float, default=0.0,
                   help="append clean/clean identity pairs for this fraction of entries")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a mask generator")
    t.add_argument("--manifest", required=True)
    t.add_argument("--mode", choices=("gat", "mse"), default="gat")
    t.add_argument("--scale", default="1", help="width scale, e.g. 1/8")
    t.add_argument("--model-config", help="model.cfg file (overrides --scale)")
    t.add_argument("--lambda", dest="lambda_l1", type=float, default=1.0)
    t.add_argument("--lr", type=float, default=2e-4)
    t.add_argument("--epochs", type=int, default=1)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)

    d = sub.add_parser("dereverb", help="dereverberate one file or a raw float32 stream")
    d.add_argument("--model", required=True)
    d.add_argument("--in", dest="inp", required=True, help="WAV path or - for raw float32 stdin")
    d.add_argument("--out", required=True, help="WAV path or - for raw float32 stdout")
    d.add_argument("--online", action="store_true")
    d.add_argument("--chunk", type=_positive_int, default=40, help="frames per chunk (presets 10, 20, 40)")
    d.add_argument("--carry-state", action="store_true", help="carry forward LSTM state across chunks")

    e = sub.add_parser("evaluate", help="score a system over a manifest")
    e.add_argument("--manifest", required=True)
    sys_ = e.add_mutually_exclusive_group(required=True)
    sys_.add_argument("--model")
    sys_.add_argument("--oracle", action="store_true", help="apply the oracle PSM (upper bound)")
    sys_.add_argument("--passthrough", action="store_true", help="score the unprocessed input (lower bound)")
    e.add_argument("--input", choices=("reverb", "clean"), default="reverb",
                   help="feed the reverberant or the clean member of each pair")
    e.add_argument("--online", action="store_true")
    e.add_argument("--chunk", type=_positive_int, default=40)
    e.add_argument("--out", required=True)

    i = sub.add_parser("inspect", help="render a log-magnitude spectrogram as a PGM image")
    i.add_argument("--in", dest="inp", required=True)
    i.add_argument("--out", required=True)
    return p


# --- helpers ------------------------------------------------------------------------


def _atomic_write_bytes(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _read_input(spec) -> Waveform:
    if spec == "-":
        raw = sys.stdin.buffer.read()
        if len(raw) % 4:
            raise ValueError("raw stream length is not a multiple of 4 bytes")
        return Waveform(np.frombuffer(raw, dtype="<f4").astype(np.float64), SAMPLE_RATE)
    return read_wav(spec)


def _write_output(spec, wave: Waveform):
    if spec == "-":
        sys.stdout.buffer.write(np.asarray(wave.samples, dtype="<f4").tobytes())
        sys.stdout.buffer.flush()
    else:
        write_wav(spec, wave)


def _raw_blocks(stream):
    # yields float64 blocks; carries partial samples across reads
    tail = b""
    while True:
        chunk = stream.read(RAW_BLOCK * 4)
        if not chunk:
            break
        buf = tail + chunk
        cut = len(buf) - len(buf) % 4
        tail = buf[cut:]
        if cut:
            yield np.frombuffer(buf[:cut], dtype="<f4").astype(np.float64)
    if tail:
        raise ValueError("raw stream length is not a multiple of 4 bytes")


def spectrogram_pgm(wave: Waveform, cfg: StftConfig | None = None) -> bytes:
    """Binary PGM of the dB magnitude over [-80, 0] relative to the file peak.

    Width is the frame count, height the bin count; the lowest bin is the
    bottom row. All-zero input gives a uniform black image.
    """
    cfg = cfg or StftConfig()
    x = np.asarray(wave.samples, dtype=np.float64)
    if len(x) < cfg.frame_len:
        x = np.pad(x, (0, cfg.frame_len - len(x)))
    mag = np.abs(stft(Waveform(x, wave.sample_rate), cfg).data)  # [T, F]
    peak = mag.max()
    if peak > 0:
        db = 20 * np.log10(np.maximum(mag / peak, 1e-4))
        pix = np.round((np.clip(db, -80.0, 0.0) + 80.0) / 80.0 * 255.0).astype(np.uint8)
    else:
        pix = np.zeros(mag.shape, dtype=np.uint8)
    img = pix.T[::-1]  # rows = bins, highest frequency first
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(img).tobytes()


def _oracle(clean: Waveform, reverb: Waveform) -> Waveform:
    X, Y = to_mag_phase(stft(clean)), to_mag_phase(stft(reverb))
    out = istft(apply_mask(psm_target(X, Y), Y))
    return Waveform(out.samples[:len(reverb)], reverb.sample_rate)


# --- subcommands ---------------------------------------------------------------------


def cmd_simulate(args) -> int:
    out = Path(args.out)
    if args.synthetic:
        clean_dir = out / "clean"
        make_synthetic_clean(args.synthetic, args.duration, seed=args.seed, out_dir=clean_dir)
    else:
        clean_dir = Path(args.clean_dir)
        if not clean_dir.is_dir():
            raise ValueError(f"clean directory {clean_dir} does not exist")
    test = args.split == "test"
    rooms = rooms_from_names(args.rooms or ("default_test" if test else "default_train"))
    rt60 = args.rt60 or RT60_RANGES[args.split]
    spec = CorpusSpec(str(clean_dir), rooms, rt60, args.pairs_per_clean, args.seed, args.split)
    manifest, entries = build_corpus(spec, out)
    if args.identity_fraction:
        entries = augment_clean_identity(entries, args.identity_fraction, seed=args.seed)
        write_manifest(entries, manifest)
    flagged = sum(e.rt60_flag for e in entries)
    print(manifest)
    print(f"{len(entries)} entries, {len(rooms)} rooms, rt60 {rt60[0]:g}..{rt60[1]:g} s, {flagged} flagged")
    return EXIT_OK


def cmd_train(args) -> int:
    entries = read_manifest(args.manifest)
    if not entries:
        raise ValueError("manifest is empty")
    model_cfg = ModelConfig.load(args.model_config) if args.model_config else ModelConfig.at_scale(args.scale)
    cfg = TrainConfig(lambda_l1=args.lambda_l1, lr=args.lr, epochs=args.epochs, max_steps=args.max_steps,
                      seed=args.seed, loss_mode="gat" if args.mode == "gat" else "mse_baseline",
                      checkpoint_every=args.checkpoint_every)
    try:
        trainer, path = train(entries, model_cfg, cfg, out_dir=args.out, resume=args.resume)
    except Diverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(path)
    if trainer.log.records:
        r = trainer.log.records[-1]
        print(f"step {r.step}: d_loss {r.d_loss:.6g} g_adv {r.g_adv:.6g} l1 {r.l1:.6g}")
    else:
        print("step 0: no updates")
    return EXIT_OK


def cmd_dereverb(args) -> int:
    gen = load_generator(args.model)
    if args.online:
        ccfg = ChunkConfig(args.chunk, args.carry_state)
        rep = latency_report(ccfg, gen, probe_chunks=5)
        print(f"algorithmic delay: {rep['algorithmic_delay_ms']:g} ms ({args.chunk} frames); "
              f"feed-forward median {rep['feedforward_median_ms']:.1f} ms per chunk", file=sys.stderr)
        if args.inp == "-" and args.out == "-":
            session = OnlineSession(gen, ccfg)
            for block in _raw_blocks(sys.stdin.buffer):
                out = session.push(block)
                if len(out):
                    sys.stdout.buffer.write(out.astype("<f4").tobytes())
                    sys.stdout.buffer.flush()
            sys.stdout.buffer.write(session.flush().astype("<f4").tobytes())
            sys.stdout.buffer.flush()
            return EXIT_OK
        wave = _read_input(args.inp)
        _write_output(args.out, dereverb_stream(wave, gen, ccfg))
        return EXIT_OK
    _write_output(args.out, dereverb_offline(_read_input(args.inp), gen))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    entries = read_manifest(args.manifest)
    if not entries:
        raise ValueError("manifest is empty")
    local = threading.local()

    def system(wave, clean):
        if args.passthrough:
            return wave
        if args.oracle:
            return _oracle(clean, wave)
        if not hasattr(local, "gen"):  # layers cache activations, so one generator per thread
            local.gen = load_generator(args.model)
        if args.online:
            return dereverb_stream(wave, local.gen, ChunkConfig(args.chunk))
        return dereverb_offline(wave, local.gen)

    def run(entry):
        clean = read_wav(entry.clean_path)
        src = clean if args.input == "clean" else read_wav(entry.reverb_path)
        return score(entry.utt_id, clean, system(src, clean)).rows[0]

    if args.model:
        load_generator(args.model)  # fail fast on an unusable checkpoint
    with ThreadPoolExecutor(worker_count()) as pool:
        rows = list(pool.map(run, entries))
    report = MetricReport(rows)
    out = Path(args.out)
    tmp = out.with_name(out.name + ".tmp")
    report.write_csv(tmp)
    os.replace(tmp, out)
    print(out)
    print(" ".join(f"{k} {report.mean(k):.4f}" for k in report.metrics))
    return EXIT_OK


def cmd_inspect(args) -> int:
    _atomic_write_bytes(args.out, spectrogram_pgm(read_wav(args.inp)))
    print(args.out)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "dereverb": cmd_dereverb,
            "evaluate": cmd_evaluate, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)  # usage errors exit with 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, KeyError) as exc:
        msg = str(exc)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_MISMATCH if "mismatch" in msg and "rate" not in msg else EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
