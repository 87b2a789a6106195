"""A first look at the autodiff core: tensors, tapes, and gradients.

The engine records operations on an explicit tape while it is active and
replays the recorded pulls in reverse to accumulate gradients.  Nothing
here is segmentation-specific; it is the machinery everything else
stands on.
"""

import numpy as np

from femseg.autodiff import ConvSpec, Tape, Tensor, backward, conv, record, relu

rng = np.random.default_rng(0)

# --- a custom scalar op through the public record() hook -------------------
# Any operation can join the graph by registering its pull functions.  A
# weighted sum is enough to turn a feature map into a scalar "loss".


def weighted_sum(t: Tensor, weights: np.ndarray) -> Tensor:
    out = Tensor(np.asarray((t.values * weights).sum()),
                 requires_grad=t.requires_grad)
    record(out, [(t, lambda g: g * weights)])
    return out


x = Tensor(rng.normal(size=(1, 5, 5, 2)), requires_grad=True)
weights = rng.normal(size=x.shape)

with Tape() as tape:
    activated = relu(x)
    loss = weighted_sum(activated, weights)

grads = backward(tape, loss)
print("loss:", float(loss.values))
print("dL/dx shape:", grads[x].shape)

# relu passes gradient only where x > 0; verify against the closed form.
manual = weights * (x.values > 0)
print("max |analytic - tape| :", np.abs(grads[x] - manual).max())

# --- finite differences on a convolution ----------------------------------
# Perturb one kernel element and compare the loss delta with the gradient.
spec = ConvSpec(rank=2, kernel=3, stride=1, padding="valid")
image = Tensor(rng.normal(size=(1, 9, 9, 1)))
kernel = Tensor(rng.normal(size=(3, 3, 1, 2)), requires_grad=True)
bias = Tensor(np.full(2, 0.1), requires_grad=True)
w_out = rng.normal(size=(1, 7, 7, 2))


def loss_value() -> float:
    with Tape():
        total = weighted_sum(conv(image, kernel, bias, spec), w_out)
    return float(total.values)


with Tape() as tape:
    total = weighted_sum(conv(image, kernel, bias, spec), w_out)
grads = backward(tape, total)

eps = 1e-6
kernel.values[1, 2, 0, 1] += eps
plus = loss_value()
kernel.values[1, 2, 0, 1] -= 2 * eps
minus = loss_value()
kernel.values[1, 2, 0, 1] += eps

numeric = (plus - minus) / (2 * eps)
analytic = grads[kernel][1, 2, 0, 1]
print(f"conv kernel grad: analytic={analytic:.8f} numeric={numeric:.8f}")

# Bias gradients are just the sum of the incoming weights per channel.
print("bias grad:", grads[bias], "expected:", w_out.sum(axis=(0, 1, 2)))

# --- gradients flow only into watched tensors ------------------------------
frozen = Tensor(rng.normal(size=(1, 4, 4, 1)))
with Tape() as tape:
    s = weighted_sum(relu(frozen), np.ones((1, 4, 4, 1)))
grads = backward(tape, s)
print("untracked input appears in gradients:", frozen in grads)
