"""One expectation-guided update, worked by hand.

A layer with dilation 100 gets a window of three candidate dilations that
share one kernel.  Training moves the branch weights; the new dilation is the
floored PMF-weighted mean of the window.

    python demos/egi_step_by_step.py
"""

import numpy as np

from g2lsearch import (MultiDilatedLayerState, build_local_window, expected_dilation, multi_dilated_forward,
                       pmf_from_weights)

window = build_local_window(100, fraction=0.1, samples=3)
print("window raw values  ", window.raw.tolist())
print("window dilations   ", window.dilations)

for weights in ([1, 1, 1], [6, 3, 1], [-6, 3, 1], [0.2, 0.3, 2.0]):
    alpha = pmf_from_weights(weights)
    print(f"weights {str(weights):18s} -> alpha {np.round(alpha, 3).tolist()} "
          f"-> new dilation {expected_dilation(window, alpha)}")

# the mixed layer is a convex combination of plain dilated convolutions
rng = np.random.default_rng(0)
theta = rng.normal(size=(4, 4, 3))
x = rng.normal(size=(4, 400))
state = MultiDilatedLayerState(theta, [6.0, 3.0, 1.0], window.dilations)
y = multi_dilated_forward(x, state)
print("\nmixed output", y.shape, "alpha", np.round(state.alpha, 3).tolist())
