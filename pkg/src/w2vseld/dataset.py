"""Annotation CSV ingestion, label rasterization and windowing of clips.

Canonical annotation CSV, one row per active (100 ms frame, class)::

    frame,class,azimuth_deg,elevation_deg
    frame,class,track,azimuth_deg,elevation_deg   # track column ignored

DOA targets use the SELDnet layout ``[x_0..x_{N-1}, y_0..y_{N-1}, z_0..z_{N-1}]``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ambisonics import AmbisonicClip, event_frames, read_wav
from .annotation import LABEL_HOP_S, SeldAnnotation, cart_to_sph, sph_to_cart
from .errors import DataError

SAMPLE_RATE = 16000
LABEL_HOP_SAMPLES = int(SAMPLE_RATE * LABEL_HOP_S)  # 1600
ENCODER_HOP_SAMPLES = 320

WINDOW_SAMPLES = {
    "pretrain": 64000,  # 4 s
    "framepred": 47520,  # 2.97 s
    "segpred": 1600,  # 100 ms
}


def _is_header(fields):
    try:
        float(fields[0])
        return False
    except ValueError:
        return True


def parse_csv(text: str, num_classes: int, num_frames: int | None = None) -> SeldAnnotation:
    records = []
    for lineno, fields in enumerate(csv.reader(io.StringIO(text)), start=1):
        fields = [f.strip() for f in fields]
        if not fields or all(not f for f in fields):
            continue
        if lineno == 1 and _is_header(fields):
            continue
        if len(fields) not in (4, 5):
            raise DataError(f"line {lineno}: expected 4 or 5 columns, got {len(fields)}")
        if len(fields) == 5:
            fields = fields[:2] + fields[3:]
        try:
            frame, cls = int(fields[0]), int(fields[1])
            azimuth, elevation = float(fields[2]), float(fields[3])
        except ValueError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
        if not 0 <= cls < num_classes:
            raise DataError(f"line {lineno}: class {cls} outside 0..{num_classes - 1}")
        if frame < 0:
            raise DataError(f"line {lineno}: negative frame index {frame}")
        records.append((frame, cls, sph_to_cart(azimuth, elevation)))
    try:
        return SeldAnnotation(records, num_classes, num_frames)
    except DataError as exc:
        raise DataError(f"invalid annotation: {exc}") from None


def emit_csv(ann: SeldAnnotation, header: bool = True) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    if header:
        writer.writerow(["frame", "class", "azimuth_deg", "elevation_deg"])
    for frame, cls, doa in ann.records:
        azimuth, elevation = cart_to_sph(doa)
        writer.writerow([frame, cls, f"{float(azimuth):.6f}", f"{float(elevation):.6f}"])
    return out.getvalue()


def parse_event_csv(text: str, class_names, num_frames: int | None = None) -> SeldAnnotation:
    """Event-based (onset/offset) rows, TAU-2019 style, rasterized to 100 ms.

    Columns: ``sound_event_recording,start_time,end_time,ele,azi[,dist]``.
    """
    index = {name: i for i, name in enumerate(class_names)}
    records = []
    for lineno, fields in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not fields:
            continue
        if lineno == 1 and not _looks_numeric(fields[1]):
            continue
        try:
            cls = index[fields[0].strip()]
            onset, offset = float(fields[1]), float(fields[2])
            elevation, azimuth = float(fields[3]), float(fields[4])
        except (KeyError, ValueError, IndexError) as exc:
            raise DataError(f"line {lineno}: {exc!r}") from None
        doa = sph_to_cart(azimuth, elevation)
        records.extend((f, cls, doa) for f in event_frames(onset, offset))
    return SeldAnnotation(records, len(index), num_frames)


def _looks_numeric(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


# -- windows -----------------------------------------------------------------


@dataclass(frozen=True)
class SegmentWindow:
    clip_id: str
    start_sample: int
    length_samples: int
    valid_samples: int

    @property
    def padded(self) -> bool:
        return self.valid_samples < self.length_samples


def window_iter(clip: AmbisonicClip, mode: str, clip_id: str = "", hop_samples: int | None = None):
    """Consecutive windows covering the clip; the last one is zero-padded.

    ``hop_samples`` defaults to the window length (non-overlapping).
    """
    if clip.sample_rate_hz != SAMPLE_RATE:
        raise DataError(f"windowing expects {SAMPLE_RATE} Hz audio, got {clip.sample_rate_hz}")
    length = WINDOW_SAMPLES[mode]
    hop = hop_samples or length
    L = clip.num_samples
    windows = []
    start = 0
    while True:
        windows.append(SegmentWindow(clip_id, start, length, min(length, L - start)))
        if start + length >= L:
            break
        start += hop
    return windows


def extract_window(clip: AmbisonicClip, window: SegmentWindow) -> np.ndarray:
    out = np.zeros((4, window.length_samples), dtype=clip.samples.dtype)
    chunk = clip.samples[:, window.start_sample:window.start_sample + window.valid_samples]
    out[:, :chunk.shape[1]] = chunk
    return out


# -- targets -----------------------------------------------------------------


@dataclass
class FrameTargets:
    sed: np.ndarray  # [T, N]
    doa: np.ndarray  # [T, 3N]
    active_mask: np.ndarray  # [T, 3N]
    valid: np.ndarray  # [T] bool; False for frames lying in zero padding

    @property
    def num_frames(self) -> int:
        return self.sed.shape[0]


def target_frames(length_samples: int, frame_ms: int) -> int:
    from .model import conv_output_length

    t20 = conv_output_length(length_samples)
    return t20 if frame_ms == 20 else math.ceil(t20 / 5)


def rasterize(ann: SeldAnnotation, window: SegmentWindow, frame_ms: int = 20) -> FrameTargets:
    """Dense SED/DOA targets for one window.

    Row ``t`` at 20 ms takes the label of the 100 ms frame containing the
    sample ``start + 320 t``; at 100 ms, row ``r`` takes frame ``start / 1600 + r``.
    """
    if frame_ms not in (20, 100):
        raise ValueError(f"frame_ms must be 20 or 100, got {frame_ms}")
    T = target_frames(window.length_samples, frame_ms)
    hop = ENCODER_HOP_SAMPLES if frame_ms == 20 else LABEL_HOP_SAMPLES
    starts = window.start_sample + hop * np.arange(T)
    label_frames = starts // LABEL_HOP_SAMPLES
    N = ann.num_classes
    activity, doa = ann.to_dense(int(label_frames.max()) + 1)
    sed = activity[label_frames].astype(np.float64)
    vec = doa[label_frames]  # [T, N, 3]
    doa_flat = vec.transpose(0, 2, 1).reshape(T, 3 * N)
    mask = np.tile(sed, (1, 3))
    valid = hop * np.arange(T) < window.valid_samples
    return FrameTargets(sed, doa_flat, mask, valid)


def doa_triplet(doa_flat, cls: int, num_classes: int):
    """The (x, y, z) columns of class ``cls`` in a ``[..., 3N]`` DOA array."""
    return doa_flat[..., [cls, num_classes + cls, 2 * num_classes + cls]]


def segment_targets(ann: SeldAnnotation, window: SegmentWindow):
    """Single-vector SED/DOA target for a 100 ms window.

    SED is the per-class time-max over the covered label frames; DOA is the
    per-class time-mean of active frames, renormalised.
    """
    first = window.start_sample // LABEL_HOP_SAMPLES
    last = (window.start_sample + window.length_samples - 1) // LABEL_HOP_SAMPLES
    activity, doa = ann.to_dense(last + 1)
    act = activity[first:last + 1]
    vecs = doa[first:last + 1]
    sed = act.any(axis=0).astype(np.float64)
    mean = vecs.sum(axis=0) / np.maximum(act.sum(axis=0), 1)[:, None]
    norm = np.linalg.norm(mean, axis=1, keepdims=True)
    mean = np.where(norm > 0, mean / np.where(norm > 0, norm, 1.0), 0.0)
    doa_flat = mean.T.reshape(-1)
    return sed, doa_flat, np.tile(sed, 3)


# -- corpus ------------------------------------------------------------------


@dataclass
class CorpusItem:
    clip_id: str
    clip: AmbisonicClip
    annotation: SeldAnnotation | None
    split: str = "train"


def load_manifest(path) -> list[dict]:
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(entries, list):
        raise DataError(f"{path}: manifest must be a JSON list")
    for i, e in enumerate(entries):
        if not isinstance(e, dict) or "wav_path" not in e:
            raise DataError(f"{path}: entry {i} lacks wav_path")
    return entries


def load_corpus(manifest_path, num_classes: int, split: str | None = None) -> list[CorpusItem]:
    """Load clips (and annotations when present) listed in a manifest.

    Relative paths resolve against the manifest's directory.
    """
    root = Path(manifest_path).parent
    items = []
    for entry in load_manifest(manifest_path):
        if split is not None and entry.get("split", "train") != split:
            continue
        wav_path = root / entry["wav_path"]
        clip = read_wav(wav_path)
        ann = None
        if entry.get("csv_path"):
            csv_path = root / entry["csv_path"]
            try:
                text = csv_path.read_text(encoding="utf-8")
            except OSError as exc:
                raise DataError(f"cannot read {csv_path}: {exc}") from exc
            num_frames = math.ceil(round(clip.duration_s / LABEL_HOP_S, 9))
            try:
                ann = parse_csv(text, num_classes, num_frames)
            except DataError as exc:
                raise DataError(f"{csv_path}: {exc}") from None
        items.append(CorpusItem(Path(entry["wav_path"]).stem, clip, ann, entry.get("split", "train")))
    return items


def shard(items, num_shards: int, shard_index: int, seed: int):
    """Deterministic shard of a seeded permutation; union over shards is the whole list."""
    order = np.random.default_rng(seed).permutation(len(items))
    return [items[i] for i in order[shard_index::num_shards]]
