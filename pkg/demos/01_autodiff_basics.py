"""Tour of the tensor core: taped operations, backward, and gradient checking.

Run: python demos/01_autodiff_basics.py
"""

import numpy as np

from domcond.tensor import (
    Parameter,
    Tensor,
    backward,
    conv2d,
    grad_check,
    matmul,
    relu,
    softmax_cross_entropy,
    sum_squares,
    total,
)

rng = np.random.default_rng(0)

print("== forward values ==")
a = Tensor([[1.0, 2.0], [3.0, 4.0]])
b = Tensor([[5.0], [6.0]])
print("matmul([[1,2],[3,4]], [[5],[6]]) ->", matmul(a, b).data.ravel())

print("\n== gradients flow only into parameters ==")
w = Parameter("w", rng.standard_normal((2, 2)) * 0.5)
loss = sum_squares(matmul(a, w))
backward(loss)
print("loss:", round(loss.item(), 4))
print("dloss/dw:\n", np.round(w.grad, 4))

print("\n== accumulation: a second backward doubles the gradient ==")
before = w.grad.copy()
backward(loss)
print("doubled:", np.allclose(w.grad, 2 * before))

print("\n== finite-difference oracle ==")
x = Parameter("x", rng.standard_normal((2, 1, 8, 8)))
k = Parameter("k", rng.standard_normal((4, 1, 3, 3)) * 0.3)
bias = Parameter("bias", np.zeros(4))
labels = rng.integers(0, 4, 2)


def conv_loss():
    h = relu(conv2d(x, k, bias, pad=1))
    from domcond.tensor import global_avg_pool
    return softmax_cross_entropy(global_avg_pool(h), labels)


err = grad_check(conv_loss, [x, k, bias])
print(f"conv -> relu -> pool -> cross-entropy grad check: {err:.2e} (want < 1e-4)")

print("\n== simple loss shapes ==")
p = Parameter("p", np.arange(4.0))
backward(total(p))
print("d(sum)/dp =", p.grad, "(all ones)")
