"""Margin + reconstruction objective and the Adam optimizer.

The margin loss pushes the present class's activation above m_plus and every
other class below m_minus (absent-class terms down-weighted by 0.5); the
reconstruction loss is the summed squared pixel error of the decoder output
against the [0,1] input crop, weighted 1e-5 in the total objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class DivergedRunError(RuntimeError):
    """A gradient or loss became non-finite; the run cannot continue."""


@dataclass
class LossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lambda_down: float = 0.5
    recon_weight: float = 1e-5


def one_hot(labels, classes):
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label outside [0, {classes})")
    out = np.zeros((len(labels), classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def margin_loss(activations: Tensor, labels_onehot, cfg: LossConfig = LossConfig()):
    """Mean over the batch of
    sum_k [T_k max(0, m+ - a_k)^2 + lambda (1 - T_k) max(0, a_k - m-)^2]."""
    t = np.asarray(labels_onehot, dtype=activations.dtype)
    if t.shape != activations.shape:
        raise ad.ShapeError(f"labels {t.shape} vs activations {activations.shape}")
    present = ad.relu(ad.sub(cfg.m_plus, activations))
    absent = ad.relu(ad.sub(activations, cfg.m_minus))
    per_class = ad.add(
        ad.mul(ad.mul(present, present), Tensor(t)),
        ad.mul(ad.mul(absent, absent), Tensor((1.0 - t) * cfg.lambda_down)),
    )
    return ad.tmean(ad.tsum(per_class, axis=1))


def reconstruction_loss(recon: Tensor, target):
    """Sum of squared pixel differences, averaged over the batch."""
    t = np.asarray(target, dtype=recon.dtype)
    if t.shape != recon.shape:
        raise ad.ShapeError(f"target {t.shape} vs reconstruction {recon.shape}")
    diff = ad.sub(recon, Tensor(t))
    B = recon.shape[0]
    return ad.tmean(ad.tsum(ad.reshape(ad.mul(diff, diff), (B, -1)), axis=1))


def total_loss(margin: Tensor, recon: Tensor, recon_weight) -> Tensor:
    return ad.add(margin, ad.mul(recon, recon_weight))


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        """Apply one update from the .grad fields; aborts (leaving all
        parameters untouched) if any gradient is non-finite."""
        grads = {}
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise DivergedRunError(f"non-finite gradient in {name}")
            grads[name] = g

        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
