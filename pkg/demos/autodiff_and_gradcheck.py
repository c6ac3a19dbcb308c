"""
Reverse-mode autodiff and gradient checking
===========================================

Build a tiny two-layer network from Tensor operations, backpropagate, and
compare the gradients against central finite differences.
"""

import numpy as np

from captionformer import tensor as tc
from captionformer.tensor import Tensor

rng = np.random.default_rng(0)

# parameters are leaves that want gradients; inputs are plain constants
W1 = Tensor(rng.normal(size=(4, 8)) * 0.5, requires_grad=True)
b1 = Tensor(np.zeros(8), requires_grad=True)
W2 = Tensor(rng.normal(size=(8, 3)) * 0.5, requires_grad=True)
x = rng.normal(size=(5, 4))
targets = np.array([0, 2, 1, 1, 0])


def loss_fn():
    h = tc.relu(Tensor(x) @ W1 + b1)
    logp = tc.log_softmax(h @ W2, axis=-1)
    return tc.tensor_sum(tc.pick(logp, targets)) * (-1.0 / len(targets))


# one backward pass fills .grad on every leaf
loss = loss_fn()
tc.backward(loss)
print("loss", loss.item())
print("dL/dW2 row 0", W2.grad[0])

# finite differences run in extended precision, autodiff stays in float64
err = tc.grad_check(loss_fn, [W1, b1, W2])
print("max relative error", err)

# a wrong backward rule is caught immediately
with tc.corrupted_backward():
    print("with a broken relu backward", tc.grad_check(loss_fn, [W1, b1, W2]))
