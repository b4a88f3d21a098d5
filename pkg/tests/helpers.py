"""Shared test utilities: finite differences through a live model."""

import numpy as np

from expertfuse import tensor as T


def model_grad_check(model, build_loss, names, samples_per_tensor=3,
                     step=1e-5, seed=0):
    """Finite-difference check against params living in a model's store.

    ``build_loss`` recomputes the scalar loss from the model's current
    parameter values. Returns the worst relative error over sampled
    coordinates of the named parameters.
    """
    store = model.store
    store.zero_grads()
    loss = build_loss()
    loss.backward()
    analytic = {}
    for name in names:
        grad = store[name].grad
        analytic[name] = np.zeros(store[name].shape) if grad is None else grad.copy()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in names:
        flat = store[name].data.reshape(-1)
        count = min(samples_per_tensor, flat.size)
        for coord in rng.choice(flat.size, size=count, replace=False):
            original = flat[coord]
            flat[coord] = original + step
            with T.no_grad():
                up = build_loss().item()
            flat[coord] = original - step
            with T.no_grad():
                down = build_loss().item()
            flat[coord] = original
            numeric = (up - down) / (2.0 * step)
            exact = analytic[name].reshape(-1)[coord]
            denom = max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, abs(exact - numeric) / denom)
    return worst
