"""Independent numerical oracles shared by the unit and acceptance tests."""

import numpy as np
import torch
from torch.func import vmap


def central_difference_grad(model, loss_fn, h=1e-5, chunk=256):
    """Central finite differences of ``loss_fn(params_dict)`` w.r.t. every parameter element.

    Perturbations are evaluated in vmapped chunks; the model must be float64.
    Returns a dict of gradient tensors shaped like the parameters.
    """
    names = [n for n, _ in model.named_parameters()]
    base = [p.detach().clone() for _, p in model.named_parameters()]
    sizes = [b.numel() for b in base]
    flat = torch.cat([b.reshape(-1) for b in base])

    def unflatten(vec):
        out, pos = {}, 0
        for n, b, s in zip(names, base, sizes):
            out[n] = vec[pos:pos + s].view_as(b)
            pos += s
        return out

    def f(vec):
        return loss_fn(unflatten(vec))

    batched = vmap(f)
    grad = torch.empty_like(flat)
    eye_rows = torch.arange(flat.numel())
    for lo in range(0, flat.numel(), chunk):
        idx = eye_rows[lo:lo + chunk]
        delta = torch.zeros(len(idx), flat.numel(), dtype=flat.dtype)
        delta[torch.arange(len(idx)), idx] = h
        plus = batched(flat + delta)
        minus = batched(flat - delta)
        grad[lo:lo + len(idx)] = (plus - minus) / (2 * h)
    return unflatten(grad)


def relative_errors(analytic: dict, numeric: dict, floor=1e-6):
    """Elementwise |a - n| / max(|a|, |n|, floor * max|n|) over all parameters."""
    scale = max(float(v.abs().max()) for v in numeric.values())
    errs = {}
    for k in analytic:
        a, n = analytic[k], numeric[k]
        denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=floor * scale)
        errs[k] = float(((a - n).abs() / denom).max())
    return errs


def euler_linear_error(steps, y1=1.0):
    """|Euler(v=-y, t:1->0) - exact| computed in closed form from the step recursion."""
    return abs(y1 * (1 + 1 / steps) ** steps - y1 * np.e)
