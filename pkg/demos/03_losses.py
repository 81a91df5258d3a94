"""
The six training losses on one small batch
==========================================

Same logits, same labels, six objectives.  The rare class barely moves
cross-entropy but dominates the nested dice terms.
"""

import numpy as np

from hierseg.autodiff import Tensor, softmax_channels
from hierseg.losses import LOSS_KINDS, LossParams, aggregate_hierarchy, compute_loss, hdice_loss

rng = np.random.default_rng(3)
labels = np.zeros((1, 8, 8), dtype=np.int64)
labels[0, 2:6, 2:6] = 2
labels[0, 3:5, 3:5] = 3
labels[0, 4, 4] = 4
logits = Tensor(rng.normal(size=(1, 5, 8, 8)))

params = LossParams()
for kind in LOSS_KINDS:
    value, skipped = compute_loss(kind, logits, labels, params)
    print(f"{kind:10s} {value.item(): .5f}{'  (fully filtered)' if skipped else ''}")

# the three nested terms behind hdice
q = softmax_channels(logits)
rows = q.data.transpose(0, 2, 3, 1).reshape(-1, 5)
hp = aggregate_hierarchy(Tensor(rows), labels.ravel())
res = hdice_loss(hp)
print("complete / core / enhancing terms:", [round(t.item(), 5) for t in res[:3]])

# a perfect edema pixel: DL0 = DL1 ~ -1/2, DL2 = -1, average ~ -2/3
perfect = aggregate_hierarchy(Tensor([[0.0, 0.0, 1.0, 0.0, 0.0]]), [2])
print("perfect edema pixel:", hdice_loss(perfect).total.item())
