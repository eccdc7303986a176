"""Central finite-difference gradient checking against the tape engine."""

from __future__ import annotations

import numpy as np

from .autodiff import GradientTape, backward


def max_rel_error(loss_fn, params, h=1e-5, max_coords_per_tensor=None, rng=None,
                  denom_floor=1e-3):
    """Compare tape gradients of a scalar loss against central differences.

    `loss_fn` must be a deterministic zero-argument callable that rebuilds
    the loss from the current `params` values (any randomness frozen by the
    caller). Coordinates are perturbed by +/-h; the relative error uses
    max(|analytic|, |numeric|, denom_floor) as denominator so that
    near-zero gradients are compared absolutely.

    When `max_coords_per_tensor` is given, that many coordinates are
    sampled per parameter (every tensor is always probed); otherwise all
    coordinates are checked.
    """
    with GradientTape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        if a is None:
            a = np.zeros_like(p.values)
        n = p.values.size
        if max_coords_per_tensor is None or n <= max_coords_per_tensor:
            coords = np.arange(n)
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        flat = p.values.reshape(-1)
        aflat = a.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(loss_fn().values)
            flat[i] = orig - h
            f_minus = float(loss_fn().values)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(aflat[i]), abs(numeric), denom_floor)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst
