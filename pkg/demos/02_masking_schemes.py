"""The three masking schemes on a small token lattice.

A lattice has one slot per (timestep, source, patch).  Random masking hides
slots independently over the whole lattice, tube masking hides the same
patches in every slice, and combined masking starts from a tube mask and hides
a fraction of the remaining patches independently in each slice.

Run with ``python3 demos/02_masking_schemes.py``.
"""
import numpy as np

from geomae.masking import combined_mask, random_mask, render_ascii, tube_mask

t, s, p = 3, 2, 196
rng = np.random.default_rng(0)

for label, mask in [
    ("random 0.95", random_mask(t, s, p, 0.95, rng)),
    ("tube 0.90", tube_mask(t, s, p, 0.90, rng)),
    ("combined 0.75 + 0.25", combined_mask(t, s, p, 0.75, 0.25, rng)),
]:
    per_slice = mask.per_slice()
    print(f"== {label}: {mask.masked_count} of {t * s * p} masked, per slice min/max "
          f"{per_slice.min()}/{per_slice.max()}")
    # two slices side by side: same patch positions under tube, different otherwise
    left = render_ascii(mask, t=0, s=0).splitlines()
    right = render_ascii(mask, t=1, s=1).splitlines()
    for a, b in zip(left, right):
        print(f"  {a}    {b}")
    print()
