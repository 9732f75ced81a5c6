"""Central finite differences against the analytic backward passes.

Runs in float64 on small random shapes and prints the worst relative error per op.
"""
import numpy as np

from hypernet import numerics as nm
from hypernet.roi_ops import roi_pool_backward, roi_pool_forward


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def rel(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


rng = np.random.default_rng(0)

# conv: loss = <conv(x), r> so the upstream gradient is r
x = rng.standard_normal((3, 7, 6))
p = nm.LayerParams(weight=rng.standard_normal((4, 3, 3, 3)), bias=rng.standard_normal(4))
r = rng.standard_normal(nm.conv2d_forward(x, p, 2, 1).shape)
gx = nm.conv2d_backward(x, p, r, 2, 1)  # weight grads accumulate in p.grads
num = numeric_grad(lambda: (nm.conv2d_forward(x, p, 2, 1) * r).sum(), x)
print(f"conv  input   {rel(gx, num):.2e}")
num = numeric_grad(lambda: (nm.conv2d_forward(x, p, 2, 1) * r).sum(), p["weight"])
print(f"conv  weight  {rel(p.grads['weight'], num):.2e}")

x = rng.standard_normal((8, 4, 5))
r = rng.standard_normal(x.shape)
num = numeric_grad(lambda: (nm.lrn_forward(x) * r).sum(), x)
print(f"lrn   input   {rel(nm.lrn_backward(x, r), num):.2e}")

# ROI pooling is piecewise linear; spread the values so no bin has a near-tie
feat = rng.permutation(5 * 9 * 9).reshape(5, 9, 9) * 0.01
boxes = np.array([[0, 0, 20, 16], [6, 4, 36, 36]], float)
out, arg = roi_pool_forward(feat, boxes, 4, (3, 3))
r = rng.standard_normal(out.shape)
num = numeric_grad(lambda: (roi_pool_forward(feat, boxes, 4, (3, 3))[0] * r).sum(), feat)
print(f"roi   input   {rel(roi_pool_backward(r, arg, feat.shape), num):.2e}")
