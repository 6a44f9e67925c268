"""
Scoring SELD predictions
========================

Predictions and references are compared on 100 ms segments. Detection is
scored with error rate and F1, localization with the mean angular error of
matched directions and the frame recall. The four numbers fold into one score
where 0 is perfect.
"""
import numpy as np

from w2vseld import SeldAnnotation, seld_score
from w2vseld.annotation import sph_to_cart
from w2vseld.metrics import evaluate_pairs

###############################################################################
# A reference and an imperfect prediction
# ---------------------------------------
# Class 0 is found but misplaced by 15 degrees. Class 2 is missed in
# segment 3 and a spurious class 1 appears in segment 4.

ref = SeldAnnotation([(f, 0, sph_to_cart(40, 0)) for f in range(5)]
                     + [(3, 2, sph_to_cart(-90, 10))], num_classes=3, num_frames=6)
pred = SeldAnnotation([(f, 0, sph_to_cart(55, 0)) for f in range(5)]
                      + [(4, 1, sph_to_cart(180, 0))], num_classes=3, num_frames=6)

report = evaluate_pairs([(ref, pred)])
for key in ("er", "f1", "doa_error_deg", "frame_recall", "sed_score", "doa_score", "seld_score"):
    print(f"{key:>14}: {getattr(report, key):.4f}")

###############################################################################
# The location-aware variant
# --------------------------
# With a 20 degree threshold the 15 degree miss still counts as a hit.
# Tightening the threshold to 10 degrees turns every class-0 hit into a
# false positive plus a false negative.

for threshold in (20.0, 10.0):
    r = evaluate_pairs([(ref, pred)], location_aware=True, threshold_deg=threshold)
    print(f"threshold {threshold:4.0f}: ER {r.er:.3f}  F1 {r.f1:.3f}")

###############################################################################
# Published baselines
# -------------------
# The composite score applied to two published baseline rows.

for row in [(0.28, 0.854, 24.6, 0.854), (0.69, 0.413, 23.10, 0.624)]:
    print(row, "->", np.round(seld_score(*row), 4))
