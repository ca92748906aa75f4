"""Finite-difference gradient verification.

Central differences at 64-bit precision are the independent oracle for the
analytic backward pass: for every coordinate of every checked array the
function under test is evaluated at +h and -h and the slope compared to the
recorded gradient. Works both for single primitives (see the test suite)
and for whole tiny models per routing algorithm (the `gradcheck` CLI).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .layers import ConvLayer, Decoder, FcCapsuleLayer, primary_capsule_tensor
from .losses import LossConfig, margin_loss, reconstruction_loss

DEFAULT_H = 1e-5
MODEL_TOLERANCE = 1e-3
PRIMITIVE_TOLERANCE = 1e-4
REL_FLOOR = 1e-6  # denominators below this are treated as absolute checks


def central_difference(f, arrays, h=DEFAULT_H):
    """Central-difference gradient of scalar-valued f for each array.

    f is called with no arguments and must read the arrays in place; they
    are perturbed one coordinate at a time and restored afterwards.
    """
    grads = []
    for arr in arrays:
        if arr.dtype != np.float64:
            raise ad.UsageError("finite differences require float64 arrays")
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric):
    """max |a - n| / max(|a|, |n|, REL_FLOOR) over all coordinates."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_function(build, arrays, h=DEFAULT_H):
    """Compare analytic and finite-difference gradients of a scalar graph.

    build(tensors) -> scalar Tensor, where tensors wrap the given float64
    arrays with requires_grad=True. Returns the max relative error across
    all arrays.
    """
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]

    out = build(tensors)
    out.backward()
    analytic = [t.grad.copy() for t in tensors]

    def f():
        with ad.no_grad():
            return float(build([ad.Tensor(a) for a in arrays]).data)

    numeric = central_difference(f, arrays, h=h)
    return max(max_relative_error(a, n) for a, n in zip(analytic, numeric))


# -- whole-model check -------------------------------------------------------


class TinyCapsNet:
    """A 6x6-input, depth-3 capsule model small enough to difference every
    parameter: conv stem -> primary capsules (4 capsules, dim 2) -> three
    routed layers ending in 2 class capsules -> reconstruction decoder."""

    def __init__(self, routing, seed=0, dtype=np.float64, iterations=2):
        rng = np.random.default_rng(seed)
        self.routing = routing
        self.stem = ConvLayer(3, 1, 1, 8, rng, dtype, name="stem")
        self.primary = ConvLayer(3, 2, 8, 8, rng, dtype, name="primary")
        self.caps = [
            FcCapsuleLayer(4, 2, 3, 3, routing, iterations, rng, dtype, name="caps1"),
            FcCapsuleLayer(3, 3, 3, 3, routing, iterations, rng, dtype, name="caps2"),
            FcCapsuleLayer(3, 3, 2, 4, routing, iterations, rng, dtype, name="class"),
        ]
        self.decoder = Decoder(2, 4, (6, 6, 1), rng, dtype, hidden=(8, 8))
        self.loss_cfg = LossConfig()

    def parameters(self):
        params = {}
        for part in [self.stem, self.primary, *self.caps, self.decoder]:
            params.update(part.parameters())
        return params

    def loss(self, images, labels_onehot, targets):
        x = ad.Tensor(images)
        feats = self.stem.forward(x)
        caps = primary_capsule_tensor(self.primary.forward(feats), 2)
        for layer in self.caps:
            caps = layer.forward(caps)
        recon = self.decoder.forward(caps.poses, labels_onehot)
        m = margin_loss(caps.activations, labels_onehot, self.loss_cfg)
        r = reconstruction_loss(recon, targets)
        return ad.add(m, ad.mul(r, self.loss_cfg.recon_weight))


def run_model_gradcheck(routing, h=DEFAULT_H, seed=0, batch=2):
    """Per-parameter-group max relative error of analytic vs FD gradients
    for a tiny depth-3 model with the given routing algorithm."""
    model = TinyCapsNet(routing, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    images = rng.normal(0.0, 1.0, size=(batch, 6, 6, 1))
    labels = rng.integers(0, 2, size=batch)
    onehot = np.zeros((batch, 2))
    onehot[np.arange(batch), labels] = 1.0
    targets = rng.uniform(0.0, 1.0, size=(batch, 6, 6, 1))

    params = model.parameters()

    loss = model.loss(images, onehot, targets)
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in params.items()}

    def f():
        with ad.no_grad():
            return float(model.loss(images, onehot, targets).data)

    numeric = central_difference(f, [p.data for p in params.values()], h=h)
    return {
        name: max_relative_error(analytic[name], num)
        for name, num in zip(params.keys(), numeric)
    }
