import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dereverb.rir import (
    ROOMS,
    Rir,
    RoomSpec,
    Scene,
    absorption_for_rt60,
    estimate_rt60,
    image_absorption_for_rt60,
    sample_scene,
    schroeder_curve,
    simulate_rir,
)


def test_eyring_room_b_hand_value():
    # V = 144, S = 168, 0.161 * 144 / (168 * 0.5) = 0.276, 1 - e^-0.276
    assert ROOMS["B"].volume == 144 and ROOMS["B"].surface == 168
    assert absorption_for_rt60((6, 6, 4), 0.5) == pytest.approx(1 - math.exp(-0.276), abs=1e-12)


def test_eyring_limits():
    assert absorption_for_rt60((3, 3, 3), 1e-6) == pytest.approx(1.0)
    assert absorption_for_rt60((3, 3, 3), 0.0) == 1.0
    assert absorption_for_rt60((3, 3, 3), 1e6) < 1e-6
    a = [absorption_for_rt60((6, 6, 4), t) for t in (0.1, 0.3, 0.5, 0.9)]
    assert all(x > y for x, y in zip(a, a[1:]))


def test_image_absorption_monotone_and_clamped():
    a = [image_absorption_for_rt60((6, 6, 4), t) for t in (0.1, 0.3, 0.5, 0.9)]
    assert all(x > y for x, y in zip(a, a[1:]))
    assert image_absorption_for_rt60((6, 6, 4), 0.0) == 1.0
    assert 0 < min(a) and max(a) <= 1


def test_anechoic_single_tap():
    room = RoomSpec((4, 5, 3), absorption=1.0)
    scene = Scene(room, (1.0, 1.0, 1.0), (3.0, 4.0, 2.0), 0.0)
    rir = simulate_rir(scene, duration=0.05, highpass_hz=None)
    nz = np.flatnonzero(rir.taps)
    d = scene.distance
    assert list(nz) == [round(d / 343 * 16000)]
    assert rir.taps[nz[0]] == pytest.approx(1 / (4 * np.pi * d))


def test_first_order_reflection_geometry():
    # source and mic on a line parallel to x; first reflection off the x = 0 wall
    room = RoomSpec((10, 10, 10), absorption=0.5)
    scene = Scene(room, (2.0, 5.0, 5.0), (4.0, 5.0, 5.0), 0.1)
    rir = simulate_rir(scene, duration=0.05, highpass_hz=None)
    direct = round(2.0 / 343 * 16000)
    mirror = round(6.0 / 343 * 16000)  # image at x = -2, 6 m from the mic
    assert rir.taps[direct] == pytest.approx(1 / (4 * np.pi * 2.0))
    beta = math.sqrt(0.5)
    assert rir.taps[mirror] == pytest.approx(beta / (4 * np.pi * 6.0))
    assert not rir.taps[direct + 1:mirror].any()


def test_invalid_scene():
    room = RoomSpec((3, 3, 3))
    with pytest.raises(ValueError, match="invalid scene"):
        simulate_rir(Scene(room, (4.0, 1.0, 1.0), (1.5, 1.5, 1.5), 0.3))
    with pytest.raises(ValueError, match="invalid scene"):
        simulate_rir(Scene(room, (1.5, 1.5, 1.5), (1.5, 1.5, 1.5), 0.3))


def test_schroeder_on_constructed_decay():
    fs, T = 16000, 0.3
    t = np.arange(int(0.6 * fs)) / fs
    rng = np.random.default_rng(7)
    taps = rng.standard_normal(len(t)) * np.exp(-t * 6.91 / T)
    assert estimate_rt60(Rir(taps, fs)) == pytest.approx(T, rel=0.05)
    edc = schroeder_curve(taps)
    assert edc[0] == 0 and np.all(np.diff(edc) <= 1e-9)


def test_single_impulse_insufficient_decay():
    taps = np.zeros(1000)
    taps[10] = 1.0
    with pytest.raises(ValueError, match="insufficient decay"):
        estimate_rt60(Rir(taps))


def test_rt60_round_trip_room_b():
    scene = sample_scene(ROOMS["B"], (0.5, 0.5), 3)
    assert estimate_rt60(simulate_rir(scene)) == pytest.approx(0.5, rel=0.2)


def test_rt60_monotone_in_target():
    room = ROOMS["A"]
    est = []
    for t in (0.2, 0.3, 0.4, 0.5, 0.6):
        alpha = image_absorption_for_rt60(room.dims, t)
        scene = Scene(RoomSpec(room.dims, alpha), (0.8, 1.1, 1.9), room.centre, t)
        est.append(estimate_rt60(simulate_rir(scene)))
    assert all(a < b for a, b in zip(est, est[1:]))


def test_energy_falls_with_absorption():
    energies = []
    for alpha in (0.1, 0.3, 0.6, 0.9):
        scene = Scene(RoomSpec((4, 5, 3), alpha), (1.0, 1.2, 1.1), (2.0, 2.5, 1.5), 0.3)
        energies.append(np.sum(simulate_rir(scene, 0.3).taps ** 2))
    assert all(a > b for a, b in zip(energies, energies[1:]))


def test_rir_deterministic():
    scene = sample_scene(ROOMS["D"], (0.1, 0.6), 11)
    a, b = simulate_rir(scene), simulate_rir(scene)
    assert np.array_equal(a.taps, b.taps)


def test_sample_scene_properties():
    s = sample_scene(ROOMS["A"], (0.0, 0.7), 5)
    assert s.mic == (1.5, 1.5, 1.5)
    assert s == sample_scene(ROOMS["A"], (0.0, 0.7), 5)
    src = np.array(s.source)
    assert np.all(src >= 0.3) and np.all(src <= 2.7)
    assert s.distance >= 0.5
    with pytest.raises(ValueError, match="room too small"):
        sample_scene(RoomSpec((0.5, 3, 3)), (0.1, 0.2), 0)


def test_sample_scene_rt60_uniform_mean():
    vals = [sample_scene(ROOMS["A"], (0.0, 0.7), [0, i], absorption="eyring").rt60_target for i in range(10_000)]
    assert np.mean(vals) == pytest.approx(0.35, rel=0.02)
    assert 0.0 <= min(vals) and max(vals) <= 0.7


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), room=st.sampled_from("ABCDE"))
def test_direct_path_index_matches_geometry(seed, room):
    scene = sample_scene(ROOMS[room], (0.1, 0.3), seed)
    rir = simulate_rir(scene, duration=0.05)
    expected = round(scene.distance / 343 * 16000)
    assert abs(int(np.argmax(np.abs(rir.taps))) - expected) <= 1
    assert rir.direct_index() == expected
