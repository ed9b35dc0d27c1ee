"""Demo: soft-threshold shrinkage and the autodiff engine.

Walks through the two soft-threshold variants (linear shrinkage and the
smoother quadratic ramp), shows the dead zone on a sweep of inputs, and
checks a composite gradient against finite differences.

Run:  python3 demos/soft_threshold_and_gradients.py
"""

import numpy as np

from fnnet import diffcore as dc
from fnnet.diffcore import SoftThresholdKind, Tensor

# --- 1. the dead zone -----------------------------------------------------
# Values inside [-t, t] are zeroed; outside, the linear kind shrinks
# toward zero by t while the quadratic kind ramps back up smoothly.

xs = np.linspace(-3.0, 3.0, 13)
t = Tensor(np.array([1.0]))
for kind in (SoftThresholdKind.LINEAR, SoftThresholdKind.QUADRATIC):
    y = dc.soft_threshold(Tensor(xs.reshape(1, -1)), t, kind).data[0]
    print(f"{kind.value:>10}:", "  ".join(f"{v:5.2f}" for v in y))

# The classic shrinkage examples with threshold 0.5:
for x in (2.0, 0.3, -2.0):
    y = dc.soft_threshold(Tensor([[x]]), Tensor([0.5]),
                          SoftThresholdKind.LINEAR).data[0, 0]
    print(f"soft_threshold({x:+.1f}, 0.5) = {y:+.2f}")

# --- 2. gradients through a small composite -------------------------------
# loss = sum(tanh(W x + b) * soft_threshold(x, t)); check dL/dW by
# central differences.

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 6)))
w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
b = Tensor(np.zeros(4), requires_grad=True)
thr = Tensor(np.full(4, 0.4), requires_grad=True)


def forward():
    h = dc.tanh(dc.linear_map(x, w, b))
    s = dc.soft_threshold(x, thr, SoftThresholdKind.QUADRATIC)
    return dc.sum_all(h * s)


loss = forward()
loss.backward()

h_step = 1e-6
i, j = 1, 2
orig = w.data[i, j]
w.data[i, j] = orig + h_step
up = float(forward().data)
w.data[i, j] = orig - h_step
down = float(forward().data)
w.data[i, j] = orig
fd = (up - down) / (2 * h_step)
print(f"\ndL/dW[{i},{j}]  analytic {w.grad[i, j]:+.8f}  finite-diff {fd:+.8f}")

# --- 3. the threshold gradient --------------------------------------------
# Raising the threshold can only remove signal, so for this loss the
# threshold gradient reflects how much mass sits outside the dead zone.
print("dL/dt per channel:", np.array2string(thr.grad, precision=5))
