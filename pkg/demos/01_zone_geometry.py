"""Where the zones land on the image, and how much of it they leave uncovered.

    python demos/01_zone_geometry.py
"""
import numpy as np

from crosszone.data import ToFParams, make_sample
from crosszone.zone_model import reference_layout, rescale_mask

for grid in [(8, 8), (2, 2)]:
    lay = reference_layout(480, 640, grid=grid)
    s = make_sample(0, 0, (480, 640), ToFParams(grid=grid, p_iid=0.0, p_block=0.0))
    for fh, fw in [(30, 40), (60, 80), (120, 160)]:
        m = rescale_mask(lay, s.tof, fh, fw)
        cols = np.nonzero(m.any(0))[0]
        print(f"grid {grid} at {fh}x{fw}: {m.mean():.1%} in-zone, "
              f"columns {cols[0]}..{cols[-1]}, side margin {cols[0]} px")

# a sample with the default dropout; invalid zones simply drop out of the mask
s = make_sample(3, 0)
print("valid zones:", int(s.tof.valid.sum()), "of", s.tof.valid.size)
print(np.array2string(s.tof.mean.round(2), max_line_width=120))
