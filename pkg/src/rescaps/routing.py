"""Dynamic routing between capsule layers.

All three routers take a vote tensor of shape (B, I, J, d): child capsule i
predicts parent capsule j's pose via a learned transformation matrix, and
the router iteratively decides how strongly each child couples to each
parent. They return the parent layer as a CapsuleTensor.

Shapes used throughout:
    votes        (B, I, J, d)
    logits b     (B, I, J)
    couplings c  (B, I, J)   softmax of b over the parent axis
    parent pose  (B, J, d)
    activations  (B, J)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, UsageError

# variance floor: identical votes would otherwise give a zero-width Gaussian
SIGMA_SQ_FLOOR = 1e-6
# keeps the weighted-mean denominators defined when all child activations vanish
MASS_EPS = 1e-8
# guards log of a parent activation that underflowed to exactly 0
ACTIVATION_LOG_EPS = 1e-30


@dataclass
class CapsuleTensor:
    """One capsule layer's output: poses (B, N, d) and activations (B, N).

    For rba/sda layers the activation is the pose norm; for em layers it is
    the separately computed sigmoid activation.
    """

    poses: Tensor
    activations: Tensor

    @property
    def count(self):
        return self.poses.shape[1]

    @property
    def dim(self):
        return self.poses.shape[2]


@dataclass
class EmParams:
    """Learned per-parent em-routing parameters plus the inverse-temperature
    schedule (one value per iteration)."""

    beta_a: Tensor
    beta_u: Tensor
    lambdas: tuple = (1.0, 2.0)

    def lam(self, t):
        return self.lambdas[t] if t < len(self.lambdas) else float(t + 1)


@dataclass
class RoutingState:
    """Per-iteration internals, recorded only when a router is called with
    return_state=True (tests and diagnostics; never the training path)."""

    iterations: int = 0
    parent_count: int = 0
    couplings: list = field(default_factory=list)       # rba/sda c, em R
    logits: np.ndarray | None = None                    # final b
    weighted_sums: np.ndarray | None = None             # final s_j
    scales: list = field(default_factory=list)          # sda t_i per update
    sigma_sq: list = field(default_factory=list)        # em variances per M-step
    parent_activations: list = field(default_factory=list)  # em a_j per M-step
    capped_votes: np.ndarray | None = None              # sda votes after capping
    capped_vote_norms: np.ndarray | None = None         # sda post-cap norms


def _check_votes(votes):
    if votes.ndim != 4:
        raise UsageError(f"votes must be (B, I, J, d), got shape {votes.shape}")


def rba_route(votes, parent_bias, iterations, return_state=False):
    """Routing by agreement.

    Couplings start uniform (b = 0); each iteration squashes the coupled
    vote sum plus bias into a parent pose and raises the logit of children
    whose votes point the same way (dot-product agreement).
    """
    _check_votes(votes)
    if iterations < 1:
        raise UsageError("rba_route needs at least one iteration")
    B, I, J, d = votes.shape
    state = RoutingState(iterations=iterations, parent_count=J)

    b = Tensor(np.zeros((B, I, J), dtype=votes.dtype))
    v = None
    for t in range(iterations):
        c = ad.softmax(b, axis=2)
        s = ad.add(ad.coupled_sum(c, votes), parent_bias)
        v = ad.squash(s, axis=-1)
        if return_state:
            state.couplings.append(c.data.copy())
            state.weighted_sums = s.data.copy()
            state.logits = b.data.copy()
        if t + 1 < iterations:
            b = ad.add(b, ad.vote_dot(votes, v))

    out = CapsuleTensor(v, ad.eps_norm(v, axis=-1))
    return (out, state) if return_state else out


def sda_scale(mean_distance, parent_count):
    """Per-child scale turning distances into logits so that a coupling of
    0.9 lands at the reference distance; negative for any J >= 2."""
    num = math.log(0.9 * (parent_count - 1)) - math.log(1.0 - 0.9)
    return ad.div(num, ad.mul(mean_distance, -0.5))


def sda_route(child, votes, parent_bias, iterations, return_state=False):
    """Scaled-distance-agreement routing.

    Differs from rba in two ways: votes are first capped so a child cannot
    predict with more confidence than its own activation, and logits are
    reassigned each iteration from scaled negative vote-to-pose distances
    instead of accumulated dot products.
    """
    _check_votes(votes)
    if iterations < 1:
        raise UsageError("sda_route needs at least one iteration")
    B, I, J, d = votes.shape
    if J < 2:
        raise UsageError("sda routing requires at least 2 parent capsules")
    state = RoutingState(iterations=iterations, parent_count=J)

    # cap: u <- min(||v_i||, ||u||) * u / ||u||
    raw_norm = ad.eps_norm(votes, axis=-1)                       # (B, I, J)
    cap = ad.minimum(ad.reshape(child.activations, (B, I, 1)), raw_norm)
    votes = ad.mul(votes, ad.reshape(ad.div(cap, raw_norm), (B, I, J, 1)))
    if return_state:
        state.capped_votes = votes.data.copy()
        state.capped_vote_norms = np.linalg.norm(votes.data, axis=-1)

    b = Tensor(np.zeros((B, I, J), dtype=votes.dtype))
    v = None
    for t in range(iterations):
        c = ad.softmax(b, axis=2)
        s = ad.add(ad.coupled_sum(c, votes), parent_bias)
        v = ad.squash(s, axis=-1)
        if return_state:
            state.couplings.append(c.data.copy())
            state.weighted_sums = s.data.copy()
            state.logits = b.data.copy()
        if t + 1 < iterations:
            dist = ad.eps_norm(ad.sub(votes, ad.reshape(v, (B, 1, J, d))), axis=-1)  # (B, I, J)
            t_i = sda_scale(ad.tmean(dist, axis=2), J)                               # (B, I)
            b = ad.mul(dist, ad.reshape(t_i, (B, I, 1)))
            if return_state:
                state.scales.append(t_i.data.copy())

    out = CapsuleTensor(v, ad.eps_norm(v, axis=-1))
    return (out, state) if return_state else out


def em_route(child, votes, params, pose_bias, iterations, return_state=False):
    """Expectation-maximization routing over pose vectors.

    Parents are axis-aligned Gaussian clusters of the votes. The M-step
    refits mean/variance from activation-weighted responsibilities and
    scores each parent by its description cost; the E-step (skipped after
    the final M-step) reassigns responsibilities from the posterior. The
    learned pose bias is added to the output means.
    """
    _check_votes(votes)
    if iterations < 1:
        raise UsageError("em_route needs at least one iteration")
    B, I, J, d = votes.shape
    state = RoutingState(iterations=iterations, parent_count=J)

    a_in = ad.reshape(child.activations, (B, I, 1))               # (B, I, 1)
    r_assign = Tensor(np.full((B, I, J), 1.0 / J, dtype=votes.dtype))
    mu = None
    a_out = None
    for t in range(iterations):
        # M-step
        r_w = ad.mul(r_assign, a_in)                              # (B, I, J)
        mass = ad.tsum(r_w, axis=1)                               # (B, J)
        denom = ad.reshape(ad.add(mass, MASS_EPS), (B, J, 1))
        mu = ad.div(ad.coupled_sum(r_w, votes), denom)            # (B, J, d)
        diff = ad.sub(votes, ad.reshape(mu, (B, 1, J, d)))
        sigma_sq = ad.add(
            ad.div(ad.coupled_sum(r_w, ad.mul(diff, diff)), denom),
            SIGMA_SQ_FLOOR,
        )                                                         # (B, J, d)
        unit_cost = ad.add(
            ad.reshape(params.beta_u, (1, J, 1)), ad.mul(ad.log(sigma_sq), 0.5)
        )
        cost = ad.mul(ad.tsum(unit_cost, axis=2), mass)           # (B, J)
        a_out = ad.sigmoid(ad.mul(ad.sub(ad.reshape(params.beta_a, (1, J)), cost), params.lam(t)))
        if return_state:
            state.couplings.append(r_assign.data.copy())
            state.sigma_sq.append(sigma_sq.data.copy())
            state.parent_activations.append(a_out.data.copy())

        # E-step
        if t + 1 < iterations:
            diff2 = ad.sub(votes, ad.reshape(mu, (B, 1, J, d)))
            log_p = ad.tsum(
                ad.sub(
                    ad.div(ad.mul(ad.mul(diff2, diff2), -1.0), ad.reshape(ad.mul(sigma_sq, 2.0), (B, 1, J, d))),
                    ad.reshape(ad.mul(ad.log(ad.mul(sigma_sq, 2.0 * math.pi)), 0.5), (B, 1, J, d)),
                ),
                axis=3,
            )                                                     # (B, I, J)
            log_a = ad.log(ad.add(a_out, ACTIVATION_LOG_EPS))
            r_assign = ad.softmax(ad.add(ad.reshape(log_a, (B, 1, J)), log_p), axis=2)
            if return_state:
                state.couplings.append(r_assign.data.copy())

    out = CapsuleTensor(ad.add(mu, pose_bias), a_out)
    return (out, state) if return_state else out
