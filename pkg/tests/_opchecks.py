"""Finite-difference cases for every autodiff op, shared across test files.

Each case builds a scalar loss from f64 arrays, compares the autodiff
gradient of every differentiable input against central differences, and
returns the worst relative error. Nonsmooth ops use inputs pushed away
from their kinks so the numeric oracle is valid.
"""

from __future__ import annotations

import numpy as np

from rseg import autodiff as ad
from rseg.backbones import ModelConfig, build_model, forward
from rseg.gradcheck import max_rel_error, numeric_grad, numeric_grad_sampled, sample_indices

H = 1e-5


def _check(build_graph, arrays, h: float = H) -> float:
    """Worst rel error across arrays; build_graph() -> (loss, tensors)."""
    loss, tensors = build_graph()
    ad.backward(loss)
    worst = 0.0
    for arr, t in zip(arrays, tensors):
        num = numeric_grad(lambda: float(build_graph()[0].data), arr, h)
        worst = max(worst, max_rel_error(t.grad, num))
    return worst


def _weighted_sum(out: ad.Tensor, coef: np.ndarray) -> ad.Tensor:
    return ad.reduce_sum(ad.mul(out, ad.Tensor(coef)))


def _away_from(x: np.ndarray, points, margin: float = 5e-3) -> np.ndarray:
    for p in points:
        x = np.where(np.abs(x - p) < margin, x + 2 * margin, x)
    return x


def check_add(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    c = rng.normal(size=(3, 4))

    def build():
        ta, tb = ad.Tensor(a, requires_grad=True), ad.Tensor(b, requires_grad=True)
        return _weighted_sum(ad.add(ta, tb), c), (ta, tb)

    return _check(build, [a, b])


def check_sub(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    c = rng.normal(size=(3, 4))

    def build():
        ta, tb = ad.Tensor(a, requires_grad=True), ad.Tensor(b, requires_grad=True)
        return _weighted_sum(ad.sub(ta, tb), c), (ta, tb)

    return _check(build, [a, b])


def check_mul(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    c = rng.normal(size=(3, 4))

    def build():
        ta, tb = ad.Tensor(a, requires_grad=True), ad.Tensor(b, requires_grad=True)
        return _weighted_sum(ad.mul(ta, tb), c), (ta, tb)

    return _check(build, [a, b])


def check_div(rng):
    a = rng.normal(size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    c = rng.normal(size=(3, 4))

    def build():
        ta, tb = ad.Tensor(a, requires_grad=True), ad.Tensor(b, requires_grad=True)
        return _weighted_sum(ad.div(ta, tb), c), (ta, tb)

    return _check(build, [a, b])


def check_scale(rng):
    a = rng.normal(size=(3, 4))
    c = rng.normal(size=(3, 4))

    def build():
        ta = ad.Tensor(a, requires_grad=True)
        return _weighted_sum(ad.scale(ta, 1.7), c), (ta,)

    return _check(build, [a])


def check_log(rng):
    a = rng.uniform(0.5, 2.0, size=(3, 4))
    c = rng.normal(size=(3, 4))

    def build():
        ta = ad.Tensor(a, requires_grad=True)
        return _weighted_sum(ad.log(ta), c), (ta,)

    return _check(build, [a])


def check_clamp(rng):
    a = _away_from(rng.uniform(-2.0, 2.0, size=(3, 4)), [-0.5, 0.5])
    c = rng.normal(size=(3, 4))

    def build():
        ta = ad.Tensor(a, requires_grad=True)
        return _weighted_sum(ad.clamp(ta, -0.5, 0.5), c), (ta,)

    return _check(build, [a])


def check_relu(rng):
    a = _away_from(rng.normal(size=(3, 4)), [0.0])
    c = rng.normal(size=(3, 4))

    def build():
        ta = ad.Tensor(a, requires_grad=True)
        return _weighted_sum(ad.relu(ta), c), (ta,)

    return _check(build, [a])


def check_sigmoid(rng):
    a = rng.normal(scale=2.0, size=(3, 4))
    c = rng.normal(size=(3, 4))

    def build():
        ta = ad.Tensor(a, requires_grad=True)
        return _weighted_sum(ad.sigmoid(ta), c), (ta,)

    return _check(build, [a])


def check_conv2d(rng):
    worst = 0.0
    for stride, pad in (((1, 1), (1, 1)), ((2, 2), (0, 0))):
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=(3,))
        sy, sx = stride
        py, px = pad
        ho = (5 + 2 * py - 3) // sy + 1
        c = rng.normal(size=(1, 3, ho, ho))

        def build():
            tx = ad.Tensor(x, requires_grad=True)
            tw = ad.Tensor(w, requires_grad=True)
            tb = ad.Tensor(b, requires_grad=True)
            return _weighted_sum(ad.conv2d(tx, tw, tb, stride, pad), c), (tx, tw, tb)

        worst = max(worst, _check(build, [x, w, b]))
    return worst


def check_conv2d_transpose(rng):
    worst = 0.0
    for pad, hf in (((0, 0), 6), ((1, 1), 4)):
        x = rng.normal(size=(1, 3, 3, 3))
        w = rng.normal(size=(3, 2, 2, 2))
        b = rng.normal(size=(2,))
        c = rng.normal(size=(1, 2, hf, hf))

        def build():
            tx = ad.Tensor(x, requires_grad=True)
            tw = ad.Tensor(w, requires_grad=True)
            tb = ad.Tensor(b, requires_grad=True)
            return _weighted_sum(ad.conv2d_transpose(tx, tw, tb, (2, 2), pad), c), (tx, tw, tb)

        worst = max(worst, _check(build, [x, w, b]))
    return worst


def check_maxpool2d(rng):
    # distinct values with gaps far above the step size keep argmax stable
    x = rng.permutation(2 * 4 * 4).astype(np.float64).reshape(1, 2, 4, 4) / 10.0
    c = rng.normal(size=(1, 2, 2, 2))

    def build():
        tx = ad.Tensor(x, requires_grad=True)
        out, _ = ad.maxpool2d(tx)
        return _weighted_sum(out, c), (tx,)

    return _check(build, [x])


def check_maxunpool2d(rng):
    src = rng.permutation(2 * 4 * 4).astype(np.float64).reshape(1, 2, 4, 4)
    with ad.no_grad():
        _, idx = ad.maxpool2d(ad.Tensor(src))
    y = rng.normal(size=(1, 2, 2, 2))
    c = rng.normal(size=(1, 2, 4, 4))

    def build():
        ty = ad.Tensor(y, requires_grad=True)
        return _weighted_sum(ad.maxunpool2d(ty, idx, (4, 4)), c), (ty,)

    return _check(build, [y])


def check_concat_channels(rng):
    a = rng.normal(size=(1, 2, 3, 3))
    b = rng.normal(size=(1, 3, 3, 3))
    c = rng.normal(size=(1, 5, 3, 3))

    def build():
        ta, tb = ad.Tensor(a, requires_grad=True), ad.Tensor(b, requires_grad=True)
        return _weighted_sum(ad.concat_channels(ta, tb), c), (ta, tb)

    return _check(build, [a, b])


def check_upsample_nearest2x(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    c = rng.normal(size=(1, 2, 6, 6))

    def build():
        tx = ad.Tensor(x, requires_grad=True)
        return _weighted_sum(ad.upsample_nearest2x(tx), c), (tx,)

    return _check(build, [x])


def check_expand_channels(rng):
    x = rng.normal(size=(1, 1, 3, 3))
    c = rng.normal(size=(1, 4, 3, 3))

    def build():
        tx = ad.Tensor(x, requires_grad=True)
        return _weighted_sum(ad.expand_channels(tx, 4), c), (tx,)

    return _check(build, [x])


def check_batchnorm2d_train(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    gamma = rng.uniform(0.5, 1.5, size=(3,))
    beta = rng.normal(scale=0.3, size=(3,))
    c = rng.normal(size=(2, 3, 4, 4))

    def build():
        tx = ad.Tensor(x, requires_grad=True)
        tg = ad.Tensor(gamma, requires_grad=True)
        tb = ad.Tensor(beta, requires_grad=True)
        rm = ad.Tensor(np.zeros(3))
        rv = ad.Tensor(np.ones(3))
        out = ad.batchnorm2d(tx, tg, tb, rm, rv, train=True)
        return _weighted_sum(out, c), (tx, tg, tb)

    return _check(build, [x, gamma, beta])


def check_batchnorm2d_eval(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    gamma = rng.uniform(0.5, 1.5, size=(3,))
    beta = rng.normal(scale=0.3, size=(3,))
    mean = rng.normal(size=(3,))
    var = rng.uniform(0.5, 2.0, size=(3,))
    c = rng.normal(size=(2, 3, 4, 4))

    def build():
        tx = ad.Tensor(x, requires_grad=True)
        tg = ad.Tensor(gamma, requires_grad=True)
        tb = ad.Tensor(beta, requires_grad=True)
        out = ad.batchnorm2d(tx, tg, tb, ad.Tensor(mean), ad.Tensor(var), train=False)
        return _weighted_sum(out, c), (tx, tg, tb)

    return _check(build, [x, gamma, beta])


def check_reduce_sum(rng):
    x = rng.normal(size=(3, 4))

    def build():
        tx = ad.Tensor(x, requires_grad=True)
        return ad.reduce_sum(tx), (tx,)

    return _check(build, [x])


# name -> (case fn, tolerance); nonsmooth or statistics-coupled ops get 1e-4,
# everything else is effectively exact under central differences
OP_CASES = {
    "add": (check_add, 1e-6),
    "sub": (check_sub, 1e-6),
    "mul": (check_mul, 1e-6),
    "div": (check_div, 1e-6),
    "scale": (check_scale, 1e-6),
    "log": (check_log, 1e-6),
    "clamp": (check_clamp, 1e-6),
    "relu": (check_relu, 1e-6),
    "sigmoid": (check_sigmoid, 1e-6),
    "conv2d": (check_conv2d, 1e-6),
    "conv2d_transpose": (check_conv2d_transpose, 1e-6),
    "maxpool2d": (check_maxpool2d, 1e-6),
    "maxunpool2d": (check_maxunpool2d, 1e-6),
    "concat_channels": (check_concat_channels, 1e-6),
    "upsample_nearest2x": (check_upsample_nearest2x, 1e-6),
    "expand_channels": (check_expand_channels, 1e-6),
    "batchnorm2d_train": (check_batchnorm2d_train, 1e-4),
    "batchnorm2d_eval": (check_batchnorm2d_eval, 1e-6),
    "reduce_sum": (check_reduce_sum, 1e-6),
}


def run_op_gradchecks(seeds) -> dict:
    """Worst rel error per op over the given seeds."""
    results = {}
    for name, (fn, _tol) in OP_CASES.items():
        worst = 0.0
        for seed in seeds:
            worst = max(worst, fn(np.random.default_rng(seed)))
        results[name] = worst
    return results


def backbone_fd_worst(backbone: str, seed: int, coords_per_tensor: int = 3,
                      h: float = H) -> float:
    """Sampled end-to-end gradcheck of a tiny f64 backbone in train mode.

    Loss is a random weighted sum of the logits; a few coordinates of every
    trainable tensor are compared against central differences. The rel-error
    floor is 1e-4: conv biases feeding train-mode BN have exactly-zero
    gradients where central differences return pure roundoff (~1e-9), and a
    tighter floor would score that noise as error.
    """
    cfg = ModelConfig(backbone=backbone, levels=2, base_channels=4)
    store = build_model(cfg, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1000)
    x = rng.normal(size=(1, 1, 16, 16))
    coef = rng.normal(size=(1, 1, 16, 16))

    def run():
        out = forward(store, ad.Tensor(x), train=True)
        return ad.reduce_sum(ad.mul(out, ad.Tensor(coef)))

    ad.backward(run())
    worst = 0.0
    for _, tens in store.trainable_items():
        idxs = sample_indices(rng, tens.data.size, coords_per_tensor)
        num = numeric_grad_sampled(lambda: float(run().data), tens.data, idxs, h=h)
        ana = tens.grad.reshape(-1)[idxs]
        worst = max(worst, max_rel_error(ana, num, floor=1e-4))
        tens.grad = None
    return worst
