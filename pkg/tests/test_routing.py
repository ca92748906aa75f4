"""Routing algorithms against independent scalar-loop transcriptions, plus
the normalization/capping/monotonicity/equivariance property suites."""

import math

import numpy as np
import pytest

from rescaps.autodiff import Tensor, UsageError
from rescaps.layers import ConfigError, FcCapsuleLayer
from rescaps.routing import (
    SIGMA_SQ_FLOOR,
    CapsuleTensor,
    EmParams,
    em_route,
    rba_route,
    sda_route,
)

from oracles import em_route_naive, rba_route_naive, sda_route_naive

N_PROPERTY_INSTANCES = 1000
N_ORACLE_INSTANCES = 20


def _random_instance(rng, B=1, I=None, J=None, d=None, dtype=np.float64):
    I = I or int(rng.integers(2, 5))
    J = J or int(rng.integers(2, 4))
    d = d or int(rng.integers(2, 5))
    votes = Tensor(rng.normal(size=(B, I, J, d)).astype(dtype))
    bias = Tensor(rng.normal(size=(J, d)).astype(dtype) * 0.1)
    acts = Tensor(rng.uniform(0.05, 1.0, size=(B, I)).astype(dtype))
    poses = Tensor(rng.normal(size=(B, I, d)).astype(dtype))
    return CapsuleTensor(poses, acts), votes, bias


def _em_params(rng, J, iterations=2, dtype=np.float64):
    return EmParams(
        beta_a=Tensor(rng.normal(size=J).astype(dtype) * 0.5),
        beta_u=Tensor(rng.normal(size=J).astype(dtype) * 0.5),
        lambdas=tuple(float(1 + t) for t in range(iterations)),
    )


# -- oracle equivalence ---------------------------------------------------------


def test_rba_matches_scalar_transcription():
    rng = np.random.default_rng(100)
    for _ in range(N_ORACLE_INSTANCES):
        child, votes, bias = _random_instance(rng)
        r = int(rng.integers(1, 4))
        got = rba_route(votes, bias, r)
        poses, acts = rba_route_naive(votes.data.tolist(), bias.data.tolist(), r)
        np.testing.assert_allclose(got.poses.data, poses, atol=1e-5)
        np.testing.assert_allclose(got.activations.data, acts, atol=1e-5)


def test_sda_matches_scalar_transcription():
    rng = np.random.default_rng(101)
    for _ in range(N_ORACLE_INSTANCES):
        child, votes, bias = _random_instance(rng)
        r = int(rng.integers(1, 4))
        got = sda_route(child, votes, bias, r)
        poses, acts = sda_route_naive(
            child.activations.data.tolist(), votes.data.tolist(), bias.data.tolist(), r
        )
        np.testing.assert_allclose(got.poses.data, poses, atol=1e-5)
        np.testing.assert_allclose(got.activations.data, acts, atol=1e-5)


def test_em_matches_scalar_transcription():
    rng = np.random.default_rng(102)
    for _ in range(N_ORACLE_INSTANCES):
        child, votes, bias = _random_instance(rng)
        J = votes.shape[2]
        r = int(rng.integers(1, 4))
        params = _em_params(rng, J, r)
        got = em_route(child, votes, params, bias, r)
        poses, acts = em_route_naive(
            child.activations.data.tolist(),
            votes.data.tolist(),
            params.beta_a.data.tolist(),
            params.beta_u.data.tolist(),
            list(params.lambdas),
            bias.data.tolist(),
            r,
        )
        np.testing.assert_allclose(got.poses.data, poses, atol=1e-5)
        np.testing.assert_allclose(got.activations.data, acts, atol=1e-5)


def test_rba_hand_sized_instance_r2():
    # 2 children, 2 parents, d=2: pinned against the transcription
    votes = Tensor(
        np.array([[[[1.0, 0.0], [0.0, 1.0]], [[0.5, 0.5], [-0.5, 0.5]]]])
    )  # (1, 2, 2, 2)
    bias = Tensor(np.array([[0.1, -0.1], [0.0, 0.2]]))
    got = rba_route(votes, bias, 2)
    poses, acts = rba_route_naive(votes.data.tolist(), bias.data.tolist(), 2)
    np.testing.assert_allclose(got.poses.data, poses, atol=1e-7)
    np.testing.assert_allclose(got.activations.data, acts, atol=1e-7)


# -- rba behavior -----------------------------------------------------------------


def test_rba_single_iteration_couplings_are_uniform():
    rng = np.random.default_rng(1)
    for _ in range(20):
        _, votes, bias = _random_instance(rng)
        J = votes.shape[2]
        _, state = rba_route(votes, bias, 1, return_state=True)
        np.testing.assert_allclose(state.couplings[0], 1.0 / J, atol=1e-7)


def test_rba_identical_votes_give_parallel_output():
    rng = np.random.default_rng(2)
    w = rng.normal(size=4)
    votes = np.broadcast_to(w, (1, 5, 3, 4)).copy()
    out = rba_route(Tensor(votes), Tensor(np.zeros((3, 4))), 2)
    for j in range(3):
        v = out.poses.data[0, j]
        cos = v @ w / (np.linalg.norm(v) * np.linalg.norm(w))
        assert cos > 1 - 1e-6


def test_rba_rejects_zero_iterations():
    _, votes, bias = _random_instance(np.random.default_rng(3))
    with pytest.raises(UsageError):
        rba_route(votes, bias, 0)


# -- sda behavior ------------------------------------------------------------------


def test_sda_caps_votes_at_child_activation():
    # child activation 0.5, raw vote norm 2.0 -> capped norm 0.5, direction kept
    d = 4
    direction = np.array([1.0, 1.0, 1.0, 1.0]) / 2.0  # unit
    votes = np.broadcast_to(direction * 2.0, (1, 1, 2, d)).copy()
    child = CapsuleTensor(
        Tensor(np.zeros((1, 1, d))), Tensor(np.array([[0.5]]))
    )
    _, state = sda_route(child, Tensor(votes), Tensor(np.zeros((2, d))), 1, return_state=True)
    np.testing.assert_allclose(state.capped_vote_norms, 0.5, atol=1e-5)


def test_sda_equidistant_votes_couple_uniformly():
    rng = np.random.default_rng(4)
    # two parents, every child's votes for both parents identical -> symmetric
    base = rng.normal(size=(1, 3, 1, 4))
    votes = np.concatenate([base, base], axis=2)
    child = CapsuleTensor(
        Tensor(rng.normal(size=(1, 3, 4))), Tensor(np.full((1, 3), 0.8))
    )
    _, state = sda_route(child, Tensor(votes), Tensor(np.zeros((2, 4))), 2, return_state=True)
    np.testing.assert_allclose(state.couplings[-1], 0.5, atol=1e-6)


def test_sda_scale_closed_form():
    from rescaps.routing import sda_scale

    # J=2, mean distance 1 -> (log 0.9 - log 0.1) / -0.5 = -2 ln 9
    t = sda_scale(Tensor(np.array([1.0])), 2)
    np.testing.assert_allclose(t.data, -2.0 * math.log(9.0), rtol=1e-12)


def test_sda_single_parent_rejected_at_layer_construction():
    rng = np.random.default_rng(5)
    with pytest.raises(ConfigError):
        FcCapsuleLayer(4, 2, 1, 2, "sda", 2, rng, np.float64)
    child, votes, bias = _random_instance(rng, J=2)
    with pytest.raises(UsageError):
        sda_route(child, Tensor(votes.data[:, :, :1]), Tensor(bias.data[:1]), 2)


# -- em behavior -------------------------------------------------------------------


def test_em_single_parent_gets_all_responsibility():
    rng = np.random.default_rng(6)
    child = CapsuleTensor(
        Tensor(rng.normal(size=(1, 4, 3))), Tensor(rng.uniform(0.2, 1, size=(1, 4)))
    )
    votes = Tensor(rng.normal(size=(1, 4, 1, 3)))
    params = _em_params(rng, 1)
    _, state = em_route(child, votes, params, Tensor(np.zeros((1, 3))), 2, return_state=True)
    np.testing.assert_allclose(state.couplings[-1], 1.0)


def test_em_symmetric_parents_share_responsibility():
    rng = np.random.default_rng(7)
    base = rng.normal(size=(1, 3, 1, 4))
    votes = np.concatenate([base, base], axis=2)  # both parents see identical votes
    child = CapsuleTensor(
        Tensor(rng.normal(size=(1, 3, 4))), Tensor(np.full((1, 3), 0.7))
    )
    params = EmParams(
        beta_a=Tensor(np.zeros(2)), beta_u=Tensor(np.zeros(2)), lambdas=(1.0, 2.0)
    )
    _, state = em_route(child, Tensor(votes), params, Tensor(np.zeros((2, 4))), 2, return_state=True)
    np.testing.assert_allclose(state.couplings[-1], 0.5, atol=1e-7)


# -- property suites (acceptance-scale random instances) -----------------------------


def test_property_coupling_normalization_rba_sda():
    rng = np.random.default_rng(8)
    instances = 0
    while instances < N_PROPERTY_INSTANCES:
        B = 20
        child, votes, bias = _random_instance(rng, B=B)
        for route in ("rba", "sda"):
            if route == "rba":
                _, state = rba_route(votes, bias, 2, return_state=True)
            else:
                _, state = sda_route(child, votes, bias, 2, return_state=True)
            for c in state.couplings:  # every iteration
                np.testing.assert_allclose(c.sum(axis=2), 1.0, atol=1e-5)
        instances += B


def test_property_em_normalization_floor_and_range():
    rng = np.random.default_rng(9)
    instances = 0
    while instances < N_PROPERTY_INSTANCES:
        B = 20
        child, votes, bias = _random_instance(rng, B=B)
        params = _em_params(rng, votes.shape[2])
        _, state = em_route(child, votes, params, bias, 2, return_state=True)
        for r_assign in state.couplings:  # uniform init and post-E-step
            np.testing.assert_allclose(r_assign.sum(axis=2), 1.0, atol=1e-5)
        for s2 in state.sigma_sq:
            assert (s2 >= SIGMA_SQ_FLOOR * (1 - 1e-9)).all()
        for a in state.parent_activations:
            # open interval in exact arithmetic; float sigmoid saturates to
            # exactly 1.0 once concentrated responsibilities push the
            # description cost past ~37, so assert the closed bounds
            assert ((a >= 0) & (a <= 1)).all()
        instances += B


def test_property_sda_capping_bound_and_direction():
    rng = np.random.default_rng(10)
    instances = 0
    while instances < N_PROPERTY_INSTANCES:
        B = 20
        child, votes, bias = _random_instance(rng, B=B)
        _, state = sda_route(child, votes, bias, 2, return_state=True)
        raw = np.linalg.norm(votes.data, axis=-1)
        bound = np.minimum(child.activations.data[:, :, None], raw)
        assert (state.capped_vote_norms <= bound + 1e-6).all()
        # capping rescales, never rotates
        cos = (state.capped_votes * votes.data).sum(-1) / (
            state.capped_vote_norms * raw + 1e-30
        )
        np.testing.assert_allclose(cos, 1.0, atol=1e-6)
        instances += B


def test_property_sda_logits_decrease_with_distance():
    rng = np.random.default_rng(11)
    instances = 0
    while instances < N_PROPERTY_INSTANCES:
        B = 10
        child, votes, bias = _random_instance(rng, B=B)
        _, state = sda_route(child, votes, bias, 2, return_state=True)
        t_i = state.scales[-1]
        assert (t_i < 0).all()
        # final logits were assigned b = dist * t_i with t_i < 0, so sorting
        # children's parents by distance must sort logits descending
        dist = state.logits / t_i[:, :, None]
        order = np.argsort(dist, axis=2)
        sorted_logits = np.take_along_axis(state.logits, order, axis=2)
        assert (np.diff(sorted_logits, axis=2) <= 1e-9).all()
        instances += B


def test_property_output_norms_below_one():
    rng = np.random.default_rng(12)
    instances = 0
    while instances < N_PROPERTY_INSTANCES:
        B = 20
        child, votes, bias = _random_instance(rng, B=B)
        for out in (
            rba_route(votes, bias, 2),
            sda_route(child, votes, bias, 2),
        ):
            assert (np.linalg.norm(out.poses.data, axis=-1) < 1.0).all()
            assert (out.activations.data < 1.0).all()
        instances += B


def test_property_permutation_equivariance():
    rng = np.random.default_rng(13)
    instances = 0
    while instances < N_PROPERTY_INSTANCES:
        B = 10
        child, votes, bias = _random_instance(rng, B=B)
        J = votes.shape[2]
        perm = rng.permutation(J)
        pvotes = Tensor(votes.data[:, :, perm, :].copy())
        pbias = Tensor(bias.data[perm].copy())

        base = rba_route(votes, bias, 2)
        swapped = rba_route(pvotes, pbias, 2)
        np.testing.assert_allclose(swapped.poses.data, base.poses.data[:, perm], atol=1e-6)

        base = sda_route(child, votes, bias, 2)
        swapped = sda_route(child, pvotes, pbias, 2)
        np.testing.assert_allclose(swapped.poses.data, base.poses.data[:, perm], atol=1e-6)

        params = _em_params(rng, J)
        pparams = EmParams(
            beta_a=Tensor(params.beta_a.data[perm].copy()),
            beta_u=Tensor(params.beta_u.data[perm].copy()),
            lambdas=params.lambdas,
        )
        base = em_route(child, votes, params, bias, 2)
        swapped = em_route(child, pvotes, pparams, pbias, 2)
        np.testing.assert_allclose(swapped.poses.data, base.poses.data[:, perm], atol=1e-6)
        np.testing.assert_allclose(
            swapped.activations.data, base.activations.data[:, perm], atol=1e-6
        )
        instances += B
