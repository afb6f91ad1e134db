"""Central-difference gradient check for the refiner, shared by the unit and acceptance tests.

A coordinate whose +-h probe flips any ReLU on or off is swapped for another
random coordinate: across a kink the difference quotient does not
approximate the derivative. ``floor`` guards the relative error against
gradients at the round-off level of the difference quotient.
"""
import numpy as np

from craft.refinement import backward, forward, init_refiner, refine_loss

MODES = [("mlp", True), ("linear", True), ("mlp", False)]


def _pattern(params, y):
    _, cache = forward(params, y)
    return None if cache.pre1 is None else (cache.pre1 > 0, cache.pre2 > 0)


def _same(a, b):
    return a is None or all(np.array_equal(x, y) for x, y in zip(a, b))


def random_point(seed, arch, residual, num_classes=10, hidden=32, batch=16,
                 weight_std=0.05, input_std=0.5):
    rng = np.random.default_rng(seed)
    params = init_refiner(seed, num_classes, hidden, arch, residual)
    for t in params.tensors.values():
        t[...] = rng.normal(scale=weight_std, size=t.shape)
    y = rng.normal(scale=input_std, size=(batch, num_classes))
    labels = rng.integers(0, num_classes, batch)
    return params, y, labels, rng


def max_relative_error(params, y, labels, rng, coords=100, h=1e-3, lambda_out=0.01,
                       floor=1e-8):
    """Returns ``(worst relative error, coordinates skipped at kinks)``."""
    out, cache = forward(params, y)
    grads = backward(params, cache, refine_loss(out, y, labels, lambda_out)[1])
    base = _pattern(params, y)
    pool = [(n, i) for n, t in params.tensors.items() for i in np.ndindex(t.shape)]
    worst, checked, skipped = 0.0, 0, 0
    for c in rng.permutation(len(pool)):
        if checked == coords:
            break
        name, idx = pool[c]
        t = params.tensors[name]
        orig = t[idx]
        vals, smooth = [], True
        for step in (h, -h):
            t[idx] = orig + step
            vals.append(refine_loss(forward(params, y)[0], y, labels, lambda_out)[0])
            smooth = smooth and _same(base, _pattern(params, y))
        t[idx] = orig
        if not smooth:
            skipped += 1
            continue
        checked += 1
        numeric = (vals[0] - vals[1]) / (2 * h)
        analytic = grads[name][idx]
        worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), floor))
    if checked < coords:
        raise RuntimeError(f"only {checked} smooth coordinates available")
    return worst, skipped
