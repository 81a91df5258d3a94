"""
From nested probabilities to one decision per pixel
===================================================

Three gates, applied in order: tumor?  core?  enhancing?  The masks that
come out are nested by construction.
"""

import numpy as np

from hierseg.classifier import decision_masks, hierarchical_decide, hierarchical_decide_array

for p in [(0.4, 0.3, 0.1), (0.6, 0.2, 0.1), (0.9, 0.6, 0.2), (0.9, 0.6, 0.4), (0.5, 0.5, 0.5)]:
    print(p, "->", hierarchical_decide(*p).name)

# a coarse grid over p2 <= p1 <= p0
g = np.linspace(0, 1, 21)
p0, p1, p2 = np.meshgrid(g, g, g, indexing="ij")
keep = (p2 <= p1) & (p1 <= p0)
codes = hierarchical_decide_array(p0[keep], p1[keep], p2[keep])
complete, core, enh = decision_masks(codes)
print("grid points", keep.sum(), "decision counts", np.bincount(codes, minlength=4))
print("nested everywhere:", bool(np.all(enh <= core) and np.all(core <= complete)))
