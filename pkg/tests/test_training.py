import numpy as np
import pytest

from dereverb import training
from dereverb.dataset import ManifestEntry
from dereverb.models import Discriminator, ModelConfig
from dereverb.neural import ParamStore, load_tensors
from dereverb.training import (
    Diverged,
    Pair,
    StepRecord,
    TrainConfig,
    Trainer,
    TrainLog,
    d_loss,
    g_loss,
    load_pairs,
    train_step,
)
from oracles import finite_difference, max_rel_error

SMALL = ModelConfig.at_scale("1/8")


def params_of(store):
    return {k: v.copy() for k, v in store.params.items()}


def same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_loss_examples():
    assert d_loss(1, 0) == 0
    assert d_loss(0, 1) == 2
    assert d_loss(0.5, 0.5) == 0.5
    assert g_loss(1, 0) == 0
    assert g_loss(0, 0.3, 1) == pytest.approx(1.3, abs=1e-15)
    assert g_loss(0.2, 0.7, 0) == pytest.approx(0.64, abs=1e-15)
    with pytest.raises(ValueError):
        g_loss(0.5, -0.1)


def test_losses_match_hand_arithmetic(rng):
    for _ in range(10):
        dr, df, l1, lam = rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0, 3), rng.uniform(0, 5)
        assert abs(d_loss(dr, df) - ((dr - 1) * (dr - 1) + df * df)) <= 1e-12
        assert abs(g_loss(df, l1, lam) - ((df - 1) * (df - 1) + lam * l1)) <= 1e-12
        assert g_loss(df, l1) == g_loss(df, l1, 1.0)


def test_train_config_defaults_and_round_trip():
    cfg = TrainConfig()
    assert cfg.lambda_l1 == 1.0 and cfg.lr == 2e-4 and cfg.loss_mode == "gat"
    other = TrainConfig(lambda_l1=3.5, lr=1e-3, epochs=4, max_steps=17, seed=5, loss_mode="mse_baseline")
    assert TrainConfig.loads(other.dumps()) == other
    for bad in ({"lambda_l1": -1}, {"lr": 0}, {"loss_mode": "wgan"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_train_log_csv(tmp_path):
    log = TrainLog()
    log.append(StepRecord(1, 0.5, 0.25, 0.1, 3.0))
    log.append(StepRecord(2, float("nan"), float("nan"), 0.09, 2.0))
    with pytest.raises(ValueError):
        log.append(StepRecord(2, 0, 0, 0, 0))
    log.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,d_loss,g_adv,l1,wall_ms"
    assert lines[2].startswith("2,,,")
    back = TrainLog.read_csv(tmp_path / "log.csv")
    assert back.column("l1").tolist() == [0.1, 0.09]
    assert np.isnan(back.column("d_loss")[1])


def test_training_is_deterministic(tiny_pairs):
    runs = []
    for _ in range(2):
        tr = Trainer(SMALL, TrainConfig(lr=1e-3, epochs=2, seed=4))
        tr.run(tiny_pairs)
        runs.append((params_of(tr.gen.store), params_of(tr.disc.store), tr.log.column("l1")))
    assert same(runs[0][0], runs[1][0]) and same(runs[0][1], runs[1][1])
    assert np.array_equal(runs[0][2], runs[1][2])


def test_update_isolation(tiny_pairs, monkeypatch):
    from dereverb.models import Generator
    gen = Generator(SMALL.generator)
    disc = Discriminator(SMALL.discriminator)
    snaps = []
    real = training.rmsprop_step

    def spy(store, *a, **k):
        before = (params_of(gen.store), params_of(disc.store))
        real(store, *a, **k)
        snaps.append((store is gen.store, before, (params_of(gen.store), params_of(disc.store))))

    monkeypatch.setattr(training, "rmsprop_step", spy)
    train_step(gen, disc, tiny_pairs[0], TrainConfig(lr=1e-3))
    (d_is_gen, d_before, d_after), (g_is_gen, g_before, g_after) = snaps
    assert not d_is_gen and g_is_gen  # D first, then G
    assert same(d_before[0], d_after[0]) and not same(d_before[1], d_after[1])
    assert same(g_before[1], g_after[1]) and not same(g_before[0], g_after[0])


def test_mse_baseline_never_touches_discriminator(tiny_pairs, monkeypatch):
    calls = {"init": 0, "forward": 0}
    init, fwd = Discriminator.__init__, Discriminator.forward

    def counting_init(self, *a, **k):
        calls["init"] += 1
        init(self, *a, **k)

    def counting_forward(self, *a, **k):
        calls["forward"] += 1
        return fwd(self, *a, **k)

    monkeypatch.setattr(Discriminator, "__init__", counting_init)
    monkeypatch.setattr(Discriminator, "forward", counting_forward)
    tr = Trainer(SMALL, TrainConfig(lr=1e-3, epochs=1, loss_mode="mse_baseline"))
    tr.run(tiny_pairs)
    assert calls == {"init": 0, "forward": 0}
    assert tr.disc is None
    assert np.all(np.isnan(tr.log.column("d_loss")))
    assert np.all(np.isfinite(tr.log.column("mse")))


def test_gat_calls_discriminator_three_times_per_step(tiny_pairs):
    tr = Trainer(SMALL, TrainConfig(lr=1e-3, epochs=1))
    tr.run(tiny_pairs)
    assert tr.disc.calls == 3 * len(tiny_pairs)


def test_lambda_zero_is_pure_adversarial(tiny_pairs):
    # the clean phase only enters the L1 target, so with lambda = 0 it cannot
    # influence the generator update
    from dereverb.models import Generator
    pair = tiny_pairs[0]
    shifted = Pair(pair.utt_id, pair.magY, pair.phaseY, pair.magX, pair.phaseX + 0.5)

    def gen_after(p, lam):
        gen, disc = Generator(SMALL.generator, seed=2), Discriminator(SMALL.discriminator, seed=3)
        parts = train_step(gen, disc, p, TrainConfig(lambda_l1=lam, lr=1e-3))
        return params_of(gen.store), parts

    (a, parts), (b, _) = gen_after(pair, 0.0), gen_after(shifted, 0.0)
    assert same(a, b)
    assert parts["l1"] > 0
    assert not same(gen_after(pair, 1.0)[0], gen_after(shifted, 1.0)[0])


class LinearMask:
    """mask = w on a single bin: the convex least-squares case."""

    def __init__(self):
        self.store = ParamStore(np.float64)
        self.store.add("w", np.zeros(1))

    def forward(self, magY):
        self._shape = magY.shape
        return np.full(magY.shape, self.store["w"][0])

    def backward(self, grad):
        self.store.accumulate("w", np.array([grad.sum()]))


def test_mse_converges_to_closed_form_mask(rng):
    y = rng.uniform(0.2, 2.0, (40, 1))
    tau = 0.6 * y + rng.normal(0, 0.05, y.shape)
    pair = Pair("lin", y, np.zeros_like(y), np.abs(tau), np.where(tau < 0, np.pi, 0.0))
    best = float(np.sum(y * tau) / np.sum(y * y))
    gen = LinearMask()
    for k in range(3000):
        lr = 3e-3 if k < 1500 else 1e-5
        train_step(gen, None, pair, TrainConfig(lr=lr, loss_mode="mse_baseline"))
    assert abs(gen.store["w"][0] - best) < 1e-3


def test_generator_gradient_through_mask_product(tiny_pairs):
    from dereverb.masks import psm_mse_loss
    from dereverb.dsp import MagPhase
    from dereverb.models import Generator
    pair = tiny_pairs[1]
    gen = Generator(SMALL.generator, dtype=np.float64)
    Y = MagPhase(pair.magY, pair.phaseY)
    X = MagPhase(pair.magX, pair.phaseX)
    mask = gen.forward(pair.magY)
    resid = mask * pair.magY - pair.target
    gen.store.zero_grad()
    gen.backward((2.0 / resid.size) * resid * pair.magY)
    for name in ("gen/fc/b", "gen/blstm1/fw/b", "gen/conv4/W"):
        pick = np.random.default_rng(0).choice(gen.store.params[name].size, 4, replace=False)
        num = finite_difference(lambda: psm_mse_loss(gen.forward(pair.magY), Y, X), gen.store.params[name], 1e-6, pick)
        ana = {i: gen.store.grads[name].reshape(-1)[i] for i in pick}
        assert max_rel_error(ana, num) < 1e-4, name


def test_large_lambda_l1_decreases(tiny_pairs):
    tr = Trainer(SMALL, TrainConfig(lr=2e-3, lambda_l1=1e6, epochs=40, seed=1))
    tr.run(tiny_pairs[:1])
    s = tr.log.smoothed("l1", 10)
    assert s[-1] < 0.8 * s[0]
    assert np.all(np.diff(s[::10]) < 0)


def test_epochs_zero_writes_initial_checkpoint(tiny_pairs, tmp_path):
    tr = Trainer(SMALL, TrainConfig(epochs=0), tmp_path)
    tr.run(tiny_pairs)
    assert tr.step == 0 and not tr.log.records
    assert (tmp_path / "ckpt_000000.drgt").exists() and (tmp_path / "model.cfg").exists()
    tensors = load_tensors(tmp_path / "ckpt_000000.drgt")
    fresh = Trainer(SMALL, TrainConfig(epochs=0))
    assert all(np.array_equal(tensors[k], v) for k, v in fresh.gen.store.params.items())


def test_resume_matches_uninterrupted(tiny_pairs, tmp_path):
    cfg = TrainConfig(lr=1e-3, epochs=3, seed=7, checkpoint_every=4)
    full = Trainer(SMALL, cfg)
    full.run(tiny_pairs)
    part = Trainer(SMALL, cfg, tmp_path)
    part.run(tiny_pairs, stop_at=4)
    resumed = Trainer(SMALL, cfg, tmp_path)
    resumed.resume(tmp_path / "ckpt_000004.drgt")
    assert resumed.step == 4
    resumed.run(tiny_pairs)
    assert resumed.step == full.step == 9
    assert same(params_of(resumed.gen.store), params_of(full.gen.store))
    assert same(params_of(resumed.disc.store), params_of(full.disc.store))
    assert [r.step for r in resumed.log.records] == list(range(1, 10))
    assert np.array_equal(resumed.log.column("l1"), full.log.column("l1"))


def test_divergence_reports_last_checkpoint(tiny_pairs, tmp_path):
    bad = Pair("bad", tiny_pairs[0].magY * np.nan, tiny_pairs[0].phaseY, tiny_pairs[0].magX, tiny_pairs[0].phaseX)
    tr = Trainer(SMALL, TrainConfig(lr=1e-3, epochs=1), tmp_path)
    with pytest.raises(Diverged) as info:
        tr.run([bad])
    assert info.value.last_checkpoint == tmp_path / "ckpt_000000.drgt"
    assert "diverged" in str(info.value)


def test_load_pairs_skips_unreadable(tmp_path, tiny_pairs):
    from dereverb.dataset import make_synthetic_clean
    [good] = make_synthetic_clean(1, 0.3, seed=1, out_dir=tmp_path)
    entries = [ManifestEntry("ok", str(good), str(good), None, "identity", 0.0, None),
               ManifestEntry("missing", str(tmp_path / "nope.wav"), str(tmp_path / "nope.wav"), None, "A", 0.3, None)]
    pairs = load_pairs(entries)
    assert [p.utt_id for p in pairs] == ["ok"]
    with pytest.raises(ValueError, match="no readable"):
        load_pairs(entries[1:])
