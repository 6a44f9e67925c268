"""First-order Ambisonics (B-format) clips, synthetic scenes and sound-field rotations.

Channel order is always W, X, Y, Z. W carries the traditional 1/sqrt(2) weight:

    W = s / sqrt(2),  X = s cos(az) cos(el),  Y = s sin(az) cos(el),  Z = s sin(el)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.io import wavfile
from scipy.signal import firwin, resample_poly

from .annotation import LABEL_HOP_S, SeldAnnotation, sph_to_cart
from .errors import DataError

W, X, Y, Z = range(4)
MAX_POLYPHONY = 3
VARIANCE_FLOOR = 1e-8


@dataclass
class AmbisonicClip:
    samples: np.ndarray
    sample_rate_hz: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 2 or samples.shape[0] != 4:
            raise DataError(f"expected a [4 x L] B-format array, got shape {samples.shape}")
        if samples.shape[1] == 0:
            raise DataError("clip has no samples")
        if int(self.sample_rate_hz) <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.issubdtype(samples.dtype, np.floating):
            samples = samples.astype(np.float64)
        self.samples = samples
        self.sample_rate_hz = int(self.sample_rate_hz)

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.num_samples / self.sample_rate_hz


def encode_direction(mono, doa, sample_rate_hz=16000) -> AmbisonicClip:
    """Encode a mono signal arriving from the Cartesian direction ``doa``."""
    s = np.asarray(mono, dtype=np.float64)
    if s.ndim != 1:
        raise DataError("mono signal must be 1-D")
    if not np.all(np.isfinite(s)):
        raise DataError("mono signal contains non-finite samples")
    d = np.asarray(doa, dtype=np.float64)
    samples = np.stack([s / np.sqrt(2.0), s * d[0], s * d[1], s * d[2]])
    return AmbisonicClip(samples, sample_rate_hz)


def encode_foa(mono, azimuth_deg, elevation_deg, sample_rate_hz=16000) -> AmbisonicClip:
    if not (-180.0 <= azimuth_deg <= 180.0 and -90.0 <= elevation_deg <= 90.0):
        raise DataError(f"angles out of range: azimuth={azimuth_deg}, elevation={elevation_deg}")
    return encode_direction(mono, sph_to_cart(azimuth_deg, elevation_deg), sample_rate_hz)


def standardize(clip: AmbisonicClip) -> AmbisonicClip:
    """Zero mean, unit variance with one set of statistics shared by all channels."""
    x = clip.samples
    mean = x.mean()
    std = math.sqrt(max(float(x.var()), VARIANCE_FLOOR))
    return AmbisonicClip((x - mean) / std, clip.sample_rate_hz)


def _resampling_filter(up, down, taps_per_phase=64, beta=8.0):
    rate = max(up, down)
    return firwin(taps_per_phase * rate + 1, 1.0 / rate, window=("kaiser", beta))


def resample(clip: AmbisonicClip, target_hz: int) -> AmbisonicClip:
    """Windowed-sinc polyphase resampling, applied identically to every channel."""
    if target_hz <= 0:
        raise DataError(f"target rate must be positive, got {target_hz}")
    if target_hz == clip.sample_rate_hz:
        return AmbisonicClip(clip.samples.copy(), target_hz)
    ratio = Fraction(target_hz, clip.sample_rate_hz)
    up, down = ratio.numerator, ratio.denominator
    out = resample_poly(clip.samples, up, down, axis=1, window=_resampling_filter(up, down))
    n_out = int(round(clip.num_samples * target_hz / clip.sample_rate_hz))
    if out.shape[1] >= n_out:
        out = out[:, :n_out]
    else:
        out = np.pad(out, ((0, 0), (0, n_out - out.shape[1])))
    return AmbisonicClip(out, target_hz)


# -- sound-field rotations ---------------------------------------------------


@dataclass(frozen=True)
class RotationTransform:
    """Azimuthal rotation/reflection realised by swapping and negating X and Y.

    ``channel_ops`` holds ``(source_channel, sign)`` for the new X and the new Y.
    """

    id: int
    name: str
    channel_ops: tuple
    label_matrix: np.ndarray = field(compare=False)


def _rotation_entry(idx, degrees, reflect):
    c, s = (round(math.cos(math.radians(degrees))), round(math.sin(math.radians(degrees))))
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)
    flip = np.diag([1.0, -1.0, 1.0]) if reflect else np.eye(3)
    matrix = rot @ flip
    ops = []
    for row in (0, 1):
        col = int(np.flatnonzero(matrix[row, :2])[0])
        ops.append((X + col, int(matrix[row, col])))
    name = ("az->-az" if reflect else "az->az") + (f"{degrees:+d}" if degrees else "")
    return RotationTransform(idx, name, tuple(ops), matrix)


_TABLE = tuple(
    _rotation_entry(i, deg, refl)
    for i, (refl, deg) in enumerate((r, d) for r in (False, True) for d in (0, 90, -90, 180))
)


def rotation_table() -> list[RotationTransform]:
    """The eight elevation-preserving transforms.

    Ids 0-3 rotate azimuth by 0, +90, -90, 180 degrees; ids 4-7 first reflect
    azimuth (az -> -az) and then apply the same rotations.
    """
    return list(_TABLE)


def apply_rotation(clip: AmbisonicClip, ann: SeldAnnotation | None, t: RotationTransform):
    x = clip.samples
    out = x.copy()
    (src_x, sign_x), (src_y, sign_y) = t.channel_ops
    out[X] = x[src_x] if sign_x > 0 else -x[src_x]
    out[Y] = x[src_y] if sign_y > 0 else -x[src_y]
    new_ann = None if ann is None else ann.transformed(t.label_matrix)
    return AmbisonicClip(out, clip.sample_rate_hz), new_ann


# -- synthetic scenes --------------------------------------------------------


@dataclass(frozen=True)
class SceneEvent:
    class_id: int
    onset_s: float
    offset_s: float
    azimuth_deg: float
    elevation_deg: float
    source_kind: str | None = None  # "tone" | "noise"; default keyed by class parity

    @property
    def kind(self) -> str:
        if self.source_kind is not None:
            return self.source_kind
        return "tone" if self.class_id % 2 == 0 else "noise"


@dataclass
class SyntheticSceneSpec:
    events: list = field(default_factory=list)
    noise_snr_db: float = 30.0
    duration_s: float = 1.0
    num_classes: int = 4


def event_frames(onset_s, offset_s):
    """100 ms label frames overlapping ``[onset_s, offset_s)``."""
    first = math.floor(round(onset_s / LABEL_HOP_S, 9))
    last = math.ceil(round(offset_s / LABEL_HOP_S, 9)) - 1
    return range(first, last + 1)


def validate_scene(spec: SyntheticSceneSpec):
    if spec.duration_s <= 0:
        raise DataError("scene duration must be positive")
    occupied = {}
    for ev in spec.events:
        if not 0 <= ev.onset_s < ev.offset_s <= spec.duration_s + 1e-9:
            raise DataError(f"event {ev} outside 0 <= onset < offset <= {spec.duration_s}")
        if not 0 <= ev.class_id < spec.num_classes:
            raise DataError(f"event class {ev.class_id} outside 0..{spec.num_classes - 1}")
        if ev.kind not in ("tone", "noise"):
            raise DataError(f"unknown source kind {ev.kind!r}")
        for f in event_frames(ev.onset_s, ev.offset_s):
            active = occupied.setdefault(f, set())
            if ev.class_id in active:
                raise DataError(f"class {ev.class_id} overlaps itself at frame {f}")
            active.add(ev.class_id)
            if len(active) > MAX_POLYPHONY:
                raise DataError(f"more than {MAX_POLYPHONY} events active at frame {f}")


def class_frequency(class_id: int) -> float:
    return 440.0 * 2.0 ** (class_id / 4.0)


def source_signal(ev: SceneEvent, num_samples: int, sample_rate_hz: int, rng) -> np.ndarray:
    """Unit-RMS tone or band-limited noise burst with 20 ms raised-cosine fades."""
    t = np.arange(num_samples) / sample_rate_hz
    f0 = class_frequency(ev.class_id)
    if ev.kind == "tone":
        sig = np.sqrt(2.0) * np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    else:
        spectrum = np.fft.rfft(rng.standard_normal(num_samples))
        freqs = np.fft.rfftfreq(num_samples, 1.0 / sample_rate_hz)
        hi = min(3.0 * f0, 0.45 * sample_rate_hz)
        spectrum[(freqs < 2.0 * f0) | (freqs > hi)] = 0.0
        sig = np.fft.irfft(spectrum, num_samples)
        rms = np.sqrt(np.mean(sig**2))
        sig = sig / rms if rms > 0 else sig
    fade = min(int(0.02 * sample_rate_hz), num_samples // 2)
    if fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        sig[:fade] *= ramp
        sig[num_samples - fade:] *= ramp[::-1]
    return sig


def scene_noise(seed: int, num_samples: int, snr_db: float) -> np.ndarray:
    """Direction-less background: independent white noise on every channel."""
    if not np.isfinite(snr_db):
        return np.zeros((4, num_samples))
    rng = np.random.default_rng([seed, 0x6E6F697365])
    return rng.standard_normal((4, num_samples)) * 10.0 ** (-snr_db / 20.0)


def synthesize_scene(spec: SyntheticSceneSpec, seed: int, sample_rate_hz: int = 16000):
    """Render a scene to B-format audio plus its 100 ms annotation.

    Each event's source signal is seeded from ``(seed, class_id, onset)`` so a
    scene is the exact sum of its single-event scenes plus the noise bed.
    """
    validate_scene(spec)
    n_total = int(round(spec.duration_s * sample_rate_hz))
    samples = np.zeros((4, n_total))
    records = []
    for ev in spec.events:
        start = int(round(ev.onset_s * sample_rate_hz))
        stop = min(int(round(ev.offset_s * sample_rate_hz)), n_total)
        rng = np.random.default_rng([seed, ev.class_id, int(round(ev.onset_s * 1000))])
        sig = source_signal(ev, stop - start, sample_rate_hz, rng)
        doa = sph_to_cart(ev.azimuth_deg, ev.elevation_deg)
        samples[:, start:stop] += encode_direction(sig, doa, sample_rate_hz).samples
        records.extend((f, ev.class_id, doa) for f in event_frames(ev.onset_s, ev.offset_s))
    samples += scene_noise(seed, n_total, spec.noise_snr_db)
    num_frames = math.ceil(round(spec.duration_s / LABEL_HOP_S, 9))
    ann = SeldAnnotation(records, spec.num_classes, num_frames)
    return AmbisonicClip(samples, sample_rate_hz), ann


def random_scene_spec(rng, num_classes=4, duration_s=4.0, max_polyphony=3, events_per_second=1.0,
                      min_event_s=0.5, max_event_s=2.0, noise_snr_db=30.0) -> SyntheticSceneSpec:
    """Draw a valid scene: static sources on a 10-degree grid, elevation within +-40."""
    events = []
    budget = max(1, int(round(events_per_second * duration_s)))
    for _ in range(20 * budget):
        if len(events) >= budget:
            break
        length = round(rng.uniform(min_event_s, min(max_event_s, duration_s)), 1)
        onset = round(rng.uniform(0.0, duration_s - length), 1)
        ev = SceneEvent(
            class_id=int(rng.integers(num_classes)),
            onset_s=onset,
            offset_s=round(onset + length, 1),
            azimuth_deg=float(rng.integers(-18, 18) * 10),
            elevation_deg=float(rng.integers(-4, 5) * 10),
        )
        trial = SyntheticSceneSpec(events + [ev], noise_snr_db, duration_s, num_classes)
        try:
            validate_scene(trial)
        except DataError:
            continue
        if _polyphony(trial) <= max_polyphony:
            events.append(ev)
    return SyntheticSceneSpec(events, noise_snr_db, duration_s, num_classes)


def _polyphony(spec):
    counts = {}
    for ev in spec.events:
        for f in event_frames(ev.onset_s, ev.offset_s):
            counts[f] = counts.get(f, 0) + 1
    return max(counts.values(), default=0)


# -- WAV I/O -----------------------------------------------------------------


def write_wav(path, clip: AmbisonicClip, sample_format="float32"):
    """Write interleaved W,X,Y,Z as RIFF PCM16 or IEEE float32, little-endian."""
    data = clip.samples.T
    if sample_format == "float32":
        data = data.astype("<f4")
    elif sample_format == "pcm16":
        data = np.round(np.clip(data, -1.0, 1.0 - 2.0**-15) * 32768.0).astype("<i2")
    else:
        raise ValueError(f"unknown sample format {sample_format!r}")
    wavfile.write(path, clip.sample_rate_hz, data)


def read_wav(path) -> AmbisonicClip:
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read WAV {path}: {exc}") from exc
    if data.ndim != 2 or data.shape[1] != 4:
        raise DataError(f"{path}: expected 4 channels, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.T.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.T.astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported sample type {data.dtype}")
    return AmbisonicClip(samples, rate)
