"""Independent reference implementations shared by the unit and acceptance tests."""
import numpy as np
import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode

from distfield.network import field_to_tensor, loss_total, prepare_inputs


def reg_loop(est, gt, mask):
    total, count = 0.0, 0
    for j in range(est.shape[0]):
        for i in range(est.shape[1]):
            if mask[j, i]:
                total += (est[j, i, 0] - gt[j, i, 0]) ** 2 + (est[j, i, 1] - gt[j, i, 1]) ** 2
                count += 1
    return total / count


def smo_loop(est):
    h, w, _ = est.shape
    total = 0.0
    for j in range(h):
        for i in range(w):
            for c in range(2):
                dx = est[j, i + 1, c] - est[j, i, c] if i + 1 < w else 0.0
                dy = est[j + 1, i, c] - est[j, i, c] if j + 1 < h else 0.0
                total += dx * dx + dy * dy
    return total / (h * w)


class ReluPattern(TorchFunctionMode):
    """Records which ReLU inputs are positive so stencils that cross a kink can be spotted."""

    def __init__(self):
        super().__init__()
        self.signs = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        if func in (torch.relu, F.relu, torch.relu_, F.relu_):
            self.signs.append((args[0] > 0).clone())
        return func(*args, **(kwargs or {}))


def finite_difference_errors(net, image, mask, gt, grads, eps=1e-3, seed=0, attempts=20):
    """Relative error between ``grads`` and a central difference, per parameter tensor.

    Each tensor is probed along a random unit direction. Directions whose
    stencil flips a ReLU are redrawn, since the loss is not differentiable
    across a kink.
    """
    x, m = prepare_inputs(image, mask, torch.float64)
    g = field_to_tensor(gt, torch.float64)
    rng = np.random.default_rng(seed)

    def loss():
        with torch.no_grad(), ReluPattern() as mode:
            value = float(loss_total(net(x, m), g, m)[0])
        return value, mode.signs

    _, base = loss()
    if not base:
        raise AssertionError("ReLU calls were not intercepted")
    errors = {}
    for name, p in net.named_parameters():
        for _ in range(attempts):
            d = torch.as_tensor(rng.normal(size=p.shape))
            d /= d.norm()
            with torch.no_grad():
                p += eps * d
                up, s_up = loss()
                p -= 2 * eps * d
                down, s_down = loss()
                p += eps * d
            if all(torch.equal(a, b) and torch.equal(a, c) for a, b, c in zip(base, s_up, s_down)):
                break
        else:
            errors[name] = float("inf")
            continue
        fd = (up - down) / (2 * eps)
        analytic = float((torch.as_tensor(grads[name]) * d).sum())
        errors[name] = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8)
    return errors
