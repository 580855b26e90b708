"""Central finite differences against autograd on a few sampled coordinates per tensor."""

import numpy as np
import torch


def worst_relative_error(loss_fn, params, n_per_param=3, eps=1e-6, seed=0):
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        for j in rng.choice(flat.numel(), size=min(n_per_param, flat.numel()), replace=False):
            old = flat[j].item()
            with torch.no_grad():
                flat[j] = old + eps
                up = loss_fn().item()
                flat[j] = old - eps
                down = loss_fn().item()
                flat[j] = old
            numeric = (up - down) / (2 * eps)
            analytic = g.view(-1)[j].item()
            worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6))
    return worst
