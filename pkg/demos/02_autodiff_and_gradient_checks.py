"""The autodiff engine and how its gradients are verified.

Every differentiable op is listed in a registry. Each op is checked against
central finite differences in float64. A debug hook can corrupt one op's
backward pass, and the check then catches it.
"""
import numpy as np

from handfold import autodiff as ad
from handfold import diagnostics

print("registered ops:", ", ".join(ad.OPS))

# a tiny two-layer network, differentiated by hand-free reverse mode
with ad.precision("float64"):
    rng = np.random.default_rng(0)
    x = ad.Tensor(rng.normal(size=(5, 4)))
    W1 = ad.Tensor(rng.normal(size=(4, 8)) * 0.5, requires_grad=True)
    W2 = ad.Tensor(rng.normal(size=(8, 1)) * 0.5, requires_grad=True)

    def loss():
        return ad.sum_all(ad.smooth_l1(ad.linear(ad.relu(ad.linear(x, W1)), W2)))

    print(f"two-layer net gradcheck error: {ad.gradcheck(loss, [W1, W2], 1e-6):.2e}")

print("\nper-op checks (tolerance 1e-4):")
for r in diagnostics.check_ops():
    print(" ", r.line())

print("\nnegative control: 'linear' backward biased by 1e-2")
with ad.grad_hook("linear", diagnostics.perturbing_hook()):
    print(" ", diagnostics.check_op("linear").line())

print("\nthe full K=1 network check runs with `handfold gradcheck` (a few minutes)")
