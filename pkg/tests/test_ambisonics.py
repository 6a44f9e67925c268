import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from w2vseld.ambisonics import (AmbisonicClip, SceneEvent, SyntheticSceneSpec, apply_rotation, encode_direction,
                                encode_foa, read_wav, resample, rotation_table, scene_noise, standardize,
                                synthesize_scene, write_wav)
from w2vseld.annotation import SeldAnnotation, sph_to_cart
from w2vseld.errors import DataError

R = 1 / np.sqrt(2)


@pytest.mark.parametrize("az, el, expected", [
    (0, 0, [R, 1, 0, 0]),
    (90, 0, [R, 0, 1, 0]),
    (0, 90, [R, 0, 0, 1]),
])
def test_encode_axis_directions(az, el, expected):
    clip = encode_foa(np.array([1.0]), az, el)
    np.testing.assert_allclose(clip.samples[:, 0], expected, atol=1e-12)


def test_encode_rejects_nonfinite():
    with pytest.raises(DataError):
        encode_foa(np.array([1.0, np.nan]), 0, 0)


def test_clip_requires_four_channels():
    with pytest.raises(DataError):
        AmbisonicClip(np.zeros((3, 10)))
    with pytest.raises(DataError):
        AmbisonicClip(np.zeros((4, 0)))


# -- rotations ---------------------------------------------------------------

TABLE = rotation_table()


def test_table_has_eight_distinct_orthogonal_transforms():
    assert len(TABLE) == 8
    mats = [t.label_matrix for t in TABLE]
    for m in mats:
        np.testing.assert_allclose(m.T @ m, np.eye(3), atol=1e-9)
        assert abs(abs(np.linalg.det(m)) - 1) < 1e-9
        np.testing.assert_array_equal(m[2], [0, 0, 1])
    assert len({m.tobytes() for m in mats}) == 8


def test_table_closed_under_composition_with_inverses():
    keys = {m.label_matrix.tobytes() for m in TABLE}
    for a in TABLE:
        assert (a.label_matrix.T).tobytes() in keys
        for b in TABLE:
            assert (a.label_matrix @ b.label_matrix).tobytes() in keys


def test_identity_entry():
    t = TABLE[0]
    assert t.channel_ops == ((1, 1), (2, 1))
    np.testing.assert_array_equal(t.label_matrix, np.eye(3))


def test_channel_ops_match_ledger_table():
    ops = {t.name: t.channel_ops for t in TABLE}
    assert ops["az->az+90"] == ((2, -1), (1, 1))  # X' = -Y, Y' = X
    assert ops["az->az-90"] == ((2, 1), (1, -1))  # X' = Y, Y' = -X
    assert ops["az->az+180"] == ((1, -1), (2, -1))
    assert ops["az->-az"] == ((1, 1), (2, -1))


def test_label_examples():
    plus90 = TABLE[1].label_matrix
    np.testing.assert_array_equal(plus90 @ [1, 0, 0], [0, 1, 0])
    reflect = TABLE[4].label_matrix
    np.testing.assert_array_equal(reflect @ [0, 1, 0], [0, -1, 0])


def _ann(doa):
    return SeldAnnotation([(0, 0, doa)], num_classes=1, num_frames=1)


def test_identity_is_bit_identical():
    rng = np.random.default_rng(0)
    clip = AmbisonicClip(rng.standard_normal((4, 100)))
    ann = _ann(sph_to_cart(33, 12))
    out, out_ann = apply_rotation(clip, ann, TABLE[0])
    np.testing.assert_array_equal(out.samples, clip.samples)
    assert out_ann == ann


def test_rotate_plus90_matches_reencoding():
    s = np.random.default_rng(1).standard_normal(64)
    rotated, _ = apply_rotation(encode_foa(s, 0, 0), None, TABLE[1])
    np.testing.assert_array_equal(rotated.samples, encode_foa(s, 90, 0).samples)


def test_plus_then_minus_90_is_identity():
    rng = np.random.default_rng(2)
    clip = AmbisonicClip(rng.standard_normal((4, 50)))
    ann = _ann(sph_to_cart(-70, 30))
    a, a_ann = apply_rotation(clip, ann, TABLE[1])
    b, b_ann = apply_rotation(a, a_ann, TABLE[2])
    np.testing.assert_allclose(b.samples, clip.samples, atol=1e-6)
    np.testing.assert_allclose(b_ann.records[0][2], ann.records[0][2], atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(az=st.floats(-180, 180), el=st.floats(-90, 90), tid=st.integers(0, 7), seed=st.integers(0, 2**16))
def test_rotation_equivariance(az, el, tid, seed):
    t = TABLE[tid]
    s = np.random.default_rng(seed).standard_normal(32)
    d = sph_to_cart(az, el)
    rotated, rot_ann = apply_rotation(encode_direction(s, d), _ann(d), t)
    np.testing.assert_array_equal(rotated.samples, encode_direction(s, t.label_matrix @ d).samples)
    np.testing.assert_array_equal(rot_ann.records[0][2], t.label_matrix @ d)


# -- standardize / resample --------------------------------------------------


def test_standardize_zero_clip():
    out = standardize(AmbisonicClip(np.zeros((4, 16))))
    np.testing.assert_array_equal(out.samples, 0)


def test_standardize_statistics_and_idempotence():
    x = 5 + 2 * np.random.default_rng(3).standard_normal((4, 4000))
    once = standardize(AmbisonicClip(x))
    assert abs(once.samples.mean()) < 1e-5
    assert abs(once.samples.std() - 1) < 1e-5
    np.testing.assert_allclose(standardize(once).samples, once.samples, atol=1e-5)


def test_standardize_is_joint_over_channels():
    x = np.ones((4, 100)) * np.array([[1.0], [2.0], [3.0], [4.0]])
    out = standardize(AmbisonicClip(x)).samples
    # channel ordering of levels survives joint statistics
    assert out[0, 0] < out[1, 0] < out[2, 0] < out[3, 0]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), scale=st.floats(1e-2, 1e3), shift=st.floats(-100, 100))
def test_standardize_property(seed, scale, shift):
    x = shift + scale * np.random.default_rng(seed).standard_normal((4, 257))
    out = standardize(AmbisonicClip(x)).samples
    assert abs(out.mean()) < 1e-5
    assert abs(out.std() - 1) < 1e-5


def test_resample_identity_and_length():
    clip = AmbisonicClip(np.random.default_rng(4).standard_normal((4, 100)), 16000)
    np.testing.assert_array_equal(resample(clip, 16000).samples, clip.samples)
    long = AmbisonicClip(np.zeros((4, 32000)), 32000)
    assert resample(long, 16000).num_samples == 16000
    odd = AmbisonicClip(np.zeros((4, 44101)), 44100)
    assert resample(odd, 16000).num_samples == round(44101 * 16000 / 44100)


def test_resample_keeps_tone_peak():
    fs, n = 48000, 48000
    tone = np.sin(2 * np.pi * 1000 * np.arange(n) / fs)
    clip = AmbisonicClip(np.tile(tone, (4, 1)), fs)
    out = resample(clip, 16000)
    for ch in out.samples:
        spectrum = np.abs(np.fft.rfft(ch))
        freqs = np.fft.rfftfreq(len(ch), 1 / 16000)
        assert freqs[np.argmax(spectrum)] == pytest.approx(1000, abs=1.0)


# -- synthetic scenes --------------------------------------------------------


def test_empty_scene_is_noise_only():
    clip, ann = synthesize_scene(SyntheticSceneSpec([], 20.0, 1.0, 4), seed=5)
    assert clip.num_samples == 16000
    assert len(ann) == 0
    np.testing.assert_array_equal(clip.samples, scene_noise(5, 16000, 20.0))


def test_single_event_rasterization():
    spec = SyntheticSceneSpec([SceneEvent(0, 0.0, 0.5, 0, 0)], 30.0, 1.0, 4)
    _, ann = synthesize_scene(spec, seed=0)
    assert [r[0] for r in ann.records] == [0, 1, 2, 3, 4]
    for _, cls, doa in ann.records:
        assert cls == 0
        np.testing.assert_array_equal(doa, [1, 0, 0])


def test_superposition():
    e1 = SceneEvent(0, 0.0, 0.6, 40, 10)
    e2 = SceneEvent(1, 0.3, 1.0, -120, -20)
    both, ann = synthesize_scene(SyntheticSceneSpec([e1, e2], np.inf, 1.0, 4), seed=9)
    one, _ = synthesize_scene(SyntheticSceneSpec([e1], np.inf, 1.0, 4), seed=9)
    two, _ = synthesize_scene(SyntheticSceneSpec([e2], np.inf, 1.0, 4), seed=9)
    np.testing.assert_allclose(both.samples, one.samples + two.samples, atol=1e-12)
    assert ann.max_polyphony() == 2
    noisy, _ = synthesize_scene(SyntheticSceneSpec([e1, e2], 20.0, 1.0, 4), seed=9)
    np.testing.assert_allclose(noisy.samples - both.samples, scene_noise(9, 16000, 20.0), atol=1e-12)


def test_scene_rejects_same_class_overlap():
    spec = SyntheticSceneSpec([SceneEvent(2, 0.0, 0.5, 0, 0), SceneEvent(2, 0.4, 0.8, 90, 0)], 30, 1.0, 4)
    with pytest.raises(DataError):
        synthesize_scene(spec, 0)


def test_scene_rejects_four_concurrent_events():
    events = [SceneEvent(c, 0.0, 0.5, 10 * c, 0) for c in range(4)]
    with pytest.raises(DataError):
        synthesize_scene(SyntheticSceneSpec(events, 30, 1.0, 4), 0)


def test_wav_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    clip = AmbisonicClip((0.1 * rng.standard_normal((4, 800))).astype(np.float32).astype(np.float64), 16000)
    write_wav(tmp_path / "a.wav", clip)
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate_hz == 16000
    np.testing.assert_array_equal(back.samples, clip.samples)
    write_wav(tmp_path / "b.wav", clip, "pcm16")
    back16 = read_wav(tmp_path / "b.wav")
    np.testing.assert_allclose(back16.samples, clip.samples, atol=1 / 32768)


def test_read_wav_rejects_stereo(tmp_path):
    from scipy.io import wavfile
    wavfile.write(tmp_path / "s.wav", 16000, np.zeros((10, 2), dtype=np.float32))
    with pytest.raises(DataError):
        read_wav(tmp_path / "s.wav")
