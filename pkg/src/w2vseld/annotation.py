"""Frame-level SELD annotations at 100 ms resolution."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import cosdg, sindg

from .errors import DataError

LABEL_HOP_S = 0.1
UNIT_NORM_TOL = 1e-6


def sph_to_cart(azimuth_deg, elevation_deg):
    """Unit Cartesian direction for azimuth/elevation in degrees.

    Multiples of 90 degrees map to exact axis vectors.
    """
    az = np.asarray(azimuth_deg, dtype=np.float64)
    el = np.asarray(elevation_deg, dtype=np.float64)
    cos_el = cosdg(el)
    return np.stack([cosdg(az) * cos_el, sindg(az) * cos_el, sindg(el)], axis=-1)


def cart_to_sph(doa):
    """Inverse of :func:`sph_to_cart`; returns (azimuth_deg, elevation_deg)."""
    doa = np.asarray(doa, dtype=np.float64)
    x, y, z = doa[..., 0], doa[..., 1], doa[..., 2]
    azimuth = np.degrees(np.arctan2(y, x))
    elevation = np.degrees(np.arctan2(z, np.hypot(x, y)))
    return azimuth, elevation


@dataclass
class SeldAnnotation:
    """Set of ``(frame_index, class_id, (x, y, z))`` records.

    ``frame_index`` counts 100 ms label frames from the start of the clip.
    ``num_frames`` is the clip length in label frames when known; metrics use it
    to decide the evaluated frame range.
    """

    records: list = field(default_factory=list)
    num_classes: int = 1
    num_frames: int | None = None

    def __post_init__(self):
        if self.num_classes < 1:
            raise DataError(f"num_classes must be positive, got {self.num_classes}")
        seen = set()
        clean = []
        for frame, cls, doa in self.records:
            frame, cls = int(frame), int(cls)
            if frame < 0:
                raise DataError(f"negative frame index {frame}")
            if not 0 <= cls < self.num_classes:
                raise DataError(f"class {cls} outside 0..{self.num_classes - 1}")
            if (frame, cls) in seen:
                raise DataError(f"duplicate record for frame {frame}, class {cls}")
            doa = tuple(float(v) for v in doa)
            if len(doa) != 3:
                raise DataError(f"DOA for frame {frame}, class {cls} is not 3-D")
            if abs(np.linalg.norm(doa) - 1.0) > UNIT_NORM_TOL:
                raise DataError(f"DOA for frame {frame}, class {cls} is not unit-norm")
            seen.add((frame, cls))
            clean.append((frame, cls, doa))
        clean.sort(key=lambda r: (r[0], r[1]))
        self.records = clean

    def __len__(self):
        return len(self.records)

    @property
    def frame_count(self) -> int:
        """Explicit ``num_frames`` or one past the last annotated frame."""
        last = self.records[-1][0] + 1 if self.records else 0
        return max(last, self.num_frames or 0)

    def to_dense(self, num_frames: int | None = None):
        """Return ``(activity [F, N] bool, doa [F, N, 3])``.

        Records beyond ``num_frames`` are dropped.
        """
        F = self.frame_count if num_frames is None else num_frames
        activity = np.zeros((F, self.num_classes), dtype=bool)
        doa = np.zeros((F, self.num_classes, 3))
        for frame, cls, vec in self.records:
            if frame < F:
                activity[frame, cls] = True
                doa[frame, cls] = vec
        return activity, doa

    @classmethod
    def from_dense(cls, activity, doa, num_frames=None):
        activity = np.asarray(activity, dtype=bool)
        doa = np.asarray(doa, dtype=np.float64)
        frames, classes = np.nonzero(activity)
        records = [(f, c, doa[f, c]) for f, c in zip(frames, classes)]
        return cls(records, activity.shape[1], num_frames if num_frames is not None else activity.shape[0])

    def transformed(self, matrix) -> SeldAnnotation:
        """Apply a 3x3 matrix to every DOA; frames and classes are untouched."""
        matrix = np.asarray(matrix, dtype=np.float64)
        records = [(f, c, matrix @ np.asarray(v)) for f, c, v in self.records]
        return SeldAnnotation(records, self.num_classes, self.num_frames)

    def max_polyphony(self) -> int:
        if not self.records:
            return 0
        frames = np.array([r[0] for r in self.records])
        return int(np.bincount(frames).max())
