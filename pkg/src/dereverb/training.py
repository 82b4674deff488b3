"""Adversarial (LSGAN + L1) and MSE-baseline training of the mask generator."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .dsp import StftConfig, read_wav, stft, to_mag_phase
from .masks import psm_product
from .models import Discriminator, Generator, ModelConfig
from .neural import load_tensors, rmsprop_step, save_tensors

log = logging.getLogger(__name__)


class Diverged(RuntimeError):
    def __init__(self, step, last_checkpoint):
        super().__init__(f"diverged at step {step}; last checkpoint: {last_checkpoint}")
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    lambda_l1: float = 1.0
    lr: float = 2e-4
    decay: float = 0.9
    eps: float = 1e-8
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    loss_mode: str = "gat"  # or "mse_baseline"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lambda_l1 < 0:
            raise ValueError("lambda_l1 must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.loss_mode not in ("gat", "mse_baseline"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")

    def dumps(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def loads(cls, text: str) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ValueError(f"unknown train config key {key!r}")
            if value == "None":
                kw[key] = None
            elif key in ("loss_mode",):
                kw[key] = value
            elif key in ("epochs", "seed", "checkpoint_every", "max_steps"):
                kw[key] = int(value)
            else:
                kw[key] = float(value)
        return cls(**kw)


@dataclass
class StepRecord:
    step: int
    d_loss: float
    g_adv: float
    l1: float
    wall_ms: float
    mse: float = float("nan")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, rec: StepRecord):
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("log steps must increase")
        self.records.append(rec)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def smoothed(self, name="l1", window=30):
        x = self.column(name)
        if len(x) < window:
            window = max(1, len(x))
        return np.convolve(x, np.ones(window) / window, mode="valid")

    def write_csv(self, path, include_timing=True):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "d_loss", "g_adv", "l1", "wall_ms"])
            for r in self.records:
                w.writerow([r.step, _fmt(r.d_loss), _fmt(r.g_adv), _fmt(r.l1),
                            f"{r.wall_ms:.3f}" if include_timing else ""])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        out = cls()
        with open(path) as fh:
            for row in csv.DictReader(fh):
                out.append(StepRecord(int(row["step"]), _parse(row["d_loss"]), _parse(row["g_adv"]),
                                      _parse(row["l1"]), _parse(row["wall_ms"])))
        return out


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _parse(s):
    return float(s) if s else float("nan")


# --- losses --------------------------------------------------------------------


def d_loss(d_real, d_fake) -> float:
    """Least-squares discriminator loss: ``(D(real) - 1)^2 + D(fake)^2``."""
    d_real = np.asarray(d_real, dtype=np.float64)
    d_fake = np.asarray(d_fake, dtype=np.float64)
    return float(np.mean((d_real - 1.0) ** 2) + np.mean(d_fake ** 2))


def g_loss(d_fake, l1, lam=1.0) -> float:
    """Least-squares generator loss plus weighted PSM L1: ``(D(fake) - 1)^2 + lam * l1``."""
    if l1 < 0:
        raise ValueError("l1 must be non-negative")
    return float(np.mean((np.asarray(d_fake, dtype=np.float64) - 1.0) ** 2) + lam * l1)


@dataclass
class Pair:
    """Spectral features of one (reverberant, clean) utterance pair."""

    utt_id: str
    magY: np.ndarray
    phaseY: np.ndarray
    magX: np.ndarray
    phaseX: np.ndarray

    @property
    def target(self) -> np.ndarray:
        # |X| cos(theta_y - theta_x)
        return self.magX * np.cos(self.phaseY - self.phaseX)


def make_pair(utt_id, reverb, clean, cfg: StftConfig | None = None) -> Pair:
    n = min(len(reverb), len(clean))
    Y = to_mag_phase(stft(type(reverb)(reverb.samples[:n], reverb.sample_rate), cfg))
    X = to_mag_phase(stft(type(clean)(clean.samples[:n], clean.sample_rate), cfg))
    return Pair(utt_id, Y.mag, Y.phase, X.mag, X.phase)


def load_pair(entry, cfg: StftConfig | None = None) -> Pair:
    return make_pair(entry.utt_id, read_wav(entry.reverb_path), read_wav(entry.clean_path), cfg)


def _check_finite(*values):
    return all(np.isfinite(v) for v in values)


def train_step(gen: Generator, disc: Discriminator | None, pair: Pair, cfg: TrainConfig) -> dict:
    """One update: discriminator first (generator frozen), then generator.

    Returns the loss parts. In ``mse_baseline`` mode the discriminator is
    never touched and the generator minimizes the PSM mean squared error.
    """
    magY = pair.magY
    target = pair.target
    N = magY.size
    mask = gen.forward(magY)
    est = mask * magY.astype(mask.dtype)
    resid = est - target.astype(mask.dtype)
    l1 = float(np.abs(resid).sum(dtype=np.float64) / N)

    if cfg.loss_mode == "mse_baseline":
        mse = float((resid.astype(np.float64) ** 2).sum() / N)
        if not _check_finite(mse, l1):
            raise FloatingPointError("non-finite loss")
        gen.backward((2.0 / N) * resid * magY)
        rmsprop_step(gen.store, cfg.lr, cfg.decay, cfg.eps)
        return {"d_loss": float("nan"), "g_adv": float("nan"), "l1": l1, "mse": mse}

    # discriminator: real = |X|, fake = G(|Y|) x |Y| with G frozen
    d_real = disc.forward(pair.magX)
    disc.backward(2.0 * (d_real - 1.0))
    d_fake = disc.forward(est)
    disc.backward(2.0 * d_fake)
    dl = d_loss(d_real, d_fake)
    if not _check_finite(dl):
        raise FloatingPointError("non-finite discriminator loss")
    rmsprop_step(disc.store, cfg.lr, cfg.decay, cfg.eps)

    # generator through the updated, frozen discriminator
    d_fake = disc.forward(est)
    g_est = disc.backward(2.0 * (d_fake - 1.0))
    disc.store.zero_grad()
    g_adv = float((d_fake - 1.0) ** 2)
    total = g_loss(d_fake, l1, cfg.lambda_l1)
    if not _check_finite(total):
        raise FloatingPointError("non-finite generator loss")
    g_est = g_est + (cfg.lambda_l1 / N) * np.sign(resid)
    gen.backward(g_est * magY)
    rmsprop_step(gen.store, cfg.lr, cfg.decay, cfg.eps)
    return {"d_loss": dl, "g_adv": g_adv, "l1": l1, "mse": float("nan")}


# --- checkpoints -----------------------------------------------------------------


def checkpoint_tensors(gen, disc, step):
    out = dict(gen.store.params)
    out.update({f"opt/{k}": v for k, v in gen.store.state.items()})
    if disc is not None:
        out.update(disc.store.params)
        out.update({f"opt/{k}": v for k, v in disc.store.state.items()})
    out["meta/step"] = np.array(step, dtype=np.float32)
    return out


def restore(gen, disc, tensors) -> int:
    for net in (gen, disc):
        if net is None:
            continue
        store = net.store
        for k in store:
            if k not in tensors:
                raise KeyError(f"checkpoint is missing {k}")
        store.assign({k: tensors[k] for k in store})
        store.state.update({k: tensors[f"opt/{k}"].astype(store.dtype).copy()
                            for k in store if f"opt/{k}" in tensors})
    return int(tensors.get("meta/step", np.array(0)))


def load_generator(path, model_cfg: ModelConfig | None = None) -> Generator:
    """Build a generator from a checkpoint file (model config read from the
    ``model.cfg`` next to it unless given)."""
    path = Path(path)
    if model_cfg is None:
        model_cfg = ModelConfig.load(path.parent / "model.cfg")
    gen = Generator(model_cfg.generator)
    tensors = load_tensors(path)
    gen.store.assign({k: tensors[k] for k in gen.store})
    return gen


class Trainer:
    """Owns one generator/discriminator pair and runs the training schedule.

    Step ``k`` (0-based) visits utterance ``perm_e[k mod n]`` of epoch
    ``e = k // n``, where ``perm_e`` is drawn from ``(seed, e)``; resuming at
    any step therefore replays exactly the same sequence.
    """

    def __init__(self, model_cfg: ModelConfig, cfg: TrainConfig, out_dir=None):
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.gen = Generator(model_cfg.generator, seed=cfg.seed)
        self.disc = None if cfg.loss_mode == "mse_baseline" else Discriminator(model_cfg.discriminator, seed=cfg.seed + 1)
        self.step = 0
        self.log = TrainLog()
        self.out_dir = Path(out_dir) if out_dir else None
        self.last_checkpoint = None

    def resume(self, path):
        self.step = restore(self.gen, self.disc, load_tensors(path))
        self.last_checkpoint = Path(path)
        log_path = Path(path).parent / "train_log.csv"
        if log_path.exists():
            self.log = TrainLog([r for r in TrainLog.read_csv(log_path).records if r.step <= self.step])

    def save(self, name=None) -> Path | None:
        if self.out_dir is None:
            return None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.model_cfg.save(self.out_dir / "model.cfg")
        (self.out_dir / "train.cfg").write_text(self.cfg.dumps())
        path = self.out_dir / (name or f"ckpt_{self.step:06d}.drgt")
        save_tensors(checkpoint_tensors(self.gen, self.disc, self.step), path)
        self.log.write_csv(self.out_dir / "train_log.csv")
        self.last_checkpoint = path
        return path

    def total_steps(self, n):
        total = self.cfg.epochs * n
        return total if self.cfg.max_steps is None else min(total, self.cfg.max_steps)

    def order(self, k, n):
        epoch, pos = divmod(k, n)
        return int(np.random.default_rng([self.cfg.seed, epoch]).permutation(n)[pos])

    def run(self, pairs: list[Pair], stop_at=None):
        if not pairs:
            raise ValueError("no training pairs")
        total = self.total_steps(len(pairs))
        if stop_at is not None:
            total = min(total, stop_at)
        if self.step == 0 and self.out_dir is not None:
            self.save()
        while self.step < total:
            pair = pairs[self.order(self.step, len(pairs))]
            t0 = time.perf_counter()
            try:
                parts = train_step(self.gen, self.disc, pair, self.cfg)
            except FloatingPointError:
                raise Diverged(self.step + 1, self.last_checkpoint) from None
            self.step += 1
            self.log.append(StepRecord(self.step, parts["d_loss"], parts["g_adv"], parts["l1"],
                                       (time.perf_counter() - t0) * 1e3, parts["mse"]))
            if self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self.save()
        if self.out_dir is not None:
            self.save("final.drgt")
        return self.log


def load_pairs(manifest, cfg: StftConfig | None = None) -> list[Pair]:
    pairs, skipped = [], 0
    for entry in manifest:
        try:
            pairs.append(load_pair(entry, cfg))
        except (OSError, ValueError) as exc:
            skipped += 1
            log.warning("skipping %s: %s", entry.utt_id, exc)
    if skipped:
        log.warning("skipped %d of %d manifest entries", skipped, len(manifest))
    if not pairs:
        raise ValueError("no readable manifest entries")
    return pairs


def train(manifest, model_cfg: ModelConfig, cfg: TrainConfig, out_dir=None, resume=None, pairs=None):
    """Train on every entry of ``manifest``; returns ``(trainer, final_path)``."""
    trainer = Trainer(model_cfg, cfg, out_dir)
    if resume is not None:
        trainer.resume(resume)
    if pairs is None:
        pairs = load_pairs(manifest)
    trainer.run(pairs)
    return trainer, trainer.last_checkpoint
