"""
Checking the autodiff core against finite differences
=====================================================

Every operator in ``glyphzero.diffcore`` records a closure that maps the
output gradient back to its inputs. ``gradcheck`` compares those closures
with central differences in float64.
"""

# %%
import numpy as np

from glyphzero import diffcore as dc
from glyphzero import losses as L
from glyphzero.diffcore import Tensor

rng = np.random.default_rng(0)


def leaf(*shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


# %%
with dc.precision(np.float64):
    x, w, b = leaf(2, 3, 6, 6), leaf(4, 3, 3, 3), leaf(4)
    print("conv2d   ", dc.gradcheck(lambda x, w, b: dc.conv2d(x, w, b, stride=2, padding=1), [x, w, b]))
    print("softmax  ", dc.gradcheck(lambda a: dc.softmax(a, axis=1), [leaf(3, 5)]))
    print("prelu    ", dc.gradcheck(dc.prelu, [leaf(2, 3, 4, 4), leaf(3)]))

# %%
# The counting loss compares aggregated per-position probabilities with
# radical counts padded by a blank class.
with dc.precision(np.float64):
    logits = leaf(2, 5, 4, 4)
    counts = np.array([[1, 0, 2, 0], [0, 3, 0, 1]])
    print("race loss", L.loss_race(logits, counts).item())
    print("race grad", dc.gradcheck(lambda r: L.loss_race(r, counts), [logits]))
