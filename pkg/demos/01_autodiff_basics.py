"""A tour of the tensor engine: build a small computation, take gradients,
and validate them against central finite differences.

Run:  python3 demos/01_autodiff_basics.py
"""

import numpy as np

from drmc import tensor as T
from drmc.tensor import Tensor, finite_diff_check


def main():
    rng = np.random.default_rng(0)

    # gradients of a composite expression
    x = Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 2)).astype(np.float32), requires_grad=True)
    loss = T.charbonnier(
        T.gelu(T.matmul(x, w)), Tensor(np.zeros((3, 2), np.float32)), eps=1e-3
    )
    loss.backward()
    print(f"loss = {float(loss.data):.6f}")
    print(f"|grad x| = {np.abs(x.grad).max():.4f}, |grad w| = {np.abs(w.grad).max():.4f}")

    # the independent oracle: central finite differences on float64 copies
    probe = Tensor(rng.standard_normal((4, 3)).astype(np.float32))
    rep = finite_diff_check(lambda t: T.tsum(T.mul(T.softmax(t, axis=-1), probe)),
                            Tensor(rng.standard_normal((4, 3)).astype(np.float32)))
    print(f"softmax gradient check: max rel err {rep.max_rel_err:.2e} "
          f"({'PASS' if rep.passed else 'FAIL'} at tol {rep.tol})")

    # Charbonnier needs a smaller step: its curvature scales as 1/eps
    rep = finite_diff_check(
        lambda t: T.charbonnier(t, Tensor(np.zeros((4, 4), np.float32)), eps=1e-3),
        Tensor(rng.uniform(-1, 1, (4, 4)).astype(np.float32)),
        h=1e-5,
    )
    print(f"charbonnier gradient check at h=1e-5: max rel err {rep.max_rel_err:.2e}")


if __name__ == "__main__":
    main()
