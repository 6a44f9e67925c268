"""
Sound-field rotations
=====================

A first-order Ambisonics clip can be rotated about the vertical axis by
swapping and negating its X and Y channels. The direction labels rotate with
the same 3x3 matrix, so one labelled clip yields eight training examples.
"""
import numpy as np

from w2vseld import apply_rotation, encode_direction, encode_foa, rotation_table
from w2vseld.annotation import SeldAnnotation, cart_to_sph, sph_to_cart

###############################################################################
# Encode a source
# ---------------
# A short noise burst placed at azimuth 30, elevation 20.

rng = np.random.default_rng(0)
mono = rng.standard_normal(1600)
clip = encode_foa(mono, 30, 20)
label = SeldAnnotation([(0, 0, sph_to_cart(30, 20))], num_classes=1, num_frames=1)
print("channel RMS (W, X, Y, Z):", np.round(np.sqrt((clip.samples**2).mean(axis=1)), 3))

###############################################################################
# Apply all eight transforms
# --------------------------
# W and Z never change. Re-encoding the mono source at the rotated direction
# gives the same samples exactly.

for t in rotation_table():
    rotated, rot_label = apply_rotation(clip, label, t)
    d = rot_label.records[0][2]
    az, el = cart_to_sph(d)
    same = np.array_equal(rotated.samples, encode_direction(mono, d).samples)
    print(f"{t.id} {t.name:<12} -> az {az:7.1f}  el {el:5.1f}  re-encoding identical: {same}")

###############################################################################
# The set is closed
# -----------------
# Composing any two transforms lands back in the table.

mats = {t.label_matrix.tobytes(): t.name for t in rotation_table()}
a, b = rotation_table()[1], rotation_table()[4]
print(f"{a.name} after {b.name} is {mats[(a.label_matrix @ b.label_matrix).tobytes()]}")
