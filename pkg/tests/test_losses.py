import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import loop_lsgan_d, loop_mean_abs, loop_mean_abs_diff, loop_mean_sq_offset, loop_total
from tcgan.losses import (
    LossBundle,
    LossWeights,
    NonFiniteLossError,
    combine,
    identity_loss,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    target_consistency,
    weighted_total,
)

REL = 1e-12


def _t(a):
    return torch.as_tensor(a, dtype=torch.float64)


def _close(value, expected, rel=REL):
    return abs(value - expected) <= rel * max(abs(expected), 1e-300)


def _random_triplets(n=50, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        yield rng.uniform(-1, 1, (3, 8, 8)), rng.uniform(-2, 2, (3, 8, 8)), rng.uniform(-2, 2, (3, 8, 8))


def test_target_consistency_examples():
    x = _t(np.zeros((3, 8, 8)))
    r = _t(np.random.default_rng(1).uniform(-2, 2, (3, 8, 8)))
    assert target_consistency(x, r, r).item() == 0.0
    assert target_consistency(x, r + 0.5, r).item() == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError, match="shape"):
        target_consistency(x, r, r[:, :4])


def test_target_consistency_matches_oracle():
    for x, r1, r2 in _random_triplets():
        got = target_consistency(_t(x), _t(r1), _t(r2)).item()
        # the oracle composes the two targets explicitly
        assert _close(got, loop_mean_abs_diff(x + r1, x + r2), rel=1e-12)


def test_identity_loss_examples_and_oracle():
    assert identity_loss(_t(np.zeros((3, 8, 8)))).item() == 0.0
    assert identity_loss(_t(np.full((3, 8, 8), 0.25))).item() == 0.25
    assert identity_loss(_t(np.full((3, 8, 8), -0.25))).item() == 0.25
    for _, r, _ in _random_triplets():
        assert _close(identity_loss(_t(r)).item(), loop_mean_abs(r))


def test_lsgan_generator_examples_and_oracle():
    assert lsgan_generator_loss(_t(np.ones((1, 4, 4)))).item() == 0.0
    assert lsgan_generator_loss(_t(np.zeros((1, 4, 4)))).item() == 1.0
    for _, s, _ in _random_triplets():
        assert _close(lsgan_generator_loss(_t(s)).item(), loop_mean_sq_offset(s, 1.0))


def test_lsgan_discriminator_examples_and_oracle():
    ones, zeros = _t(np.ones((1, 4, 4))), _t(np.zeros((1, 4, 4)))
    assert lsgan_discriminator_loss(ones, zeros).item() == 0.0
    assert lsgan_discriminator_loss(zeros, ones).item() == 1.0
    for _, a, b in _random_triplets():
        assert _close(lsgan_discriminator_loss(_t(a), _t(b)).item(), loop_lsgan_d(a, b))
    # real and fake maps may have different shapes
    a, b = np.random.default_rng(3).normal(size=(2, 1, 4, 4)), np.random.default_rng(4).normal(size=(1, 1, 2, 2))
    assert _close(lsgan_discriminator_loss(_t(a), _t(b)).item(), loop_lsgan_d(a, b))


def test_combine_examples():
    b = combine(LossWeights(), 0.2, 0.3, 0.01, 0.05, 0.07)
    assert abs(b.total - 1.5) <= 1e-12
    assert combine(LossWeights(), 0, 0, 0, 0, 0).total == 0.0
    assert combine(LossWeights(0, 0, 0), 3.0, 1.0, 2.0, 5.0, 9.0).total == 0.0
    assert LossWeights() == LossWeights(1.0, 40.0, 5.0)


def test_combine_matches_oracle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        w = rng.uniform(0, 50, 3)
        comps = rng.uniform(0, 2, 5)
        got = combine(LossWeights(*w), *comps).total
        assert _close(got, loop_total(w, *comps))


def test_combine_accepts_tensors_and_keeps_components():
    b = combine(LossWeights(), _t(0.2), _t(0.3), _t(0.01), _t(0.05), _t(0.07))
    assert isinstance(b, LossBundle)
    assert (b.gan1, b.gan2, b.tc, b.idt1, b.idt2) == (0.2, 0.3, 0.01, 0.05, 0.07)
    assert b.csv_row(7) == [7, 0.2, 0.3, 0.01, 0.05, 0.07, b.total]
    assert LossBundle.CSV_HEADER == ("iter", "gan1", "gan2", "tc", "idt1", "idt2", "total")


@pytest.mark.parametrize("pos,name", [(0, "gan1"), (2, "tc"), (4, "idt2")])
def test_combine_rejects_non_finite(pos, name):
    comps = [0.1] * 5
    comps[pos] = math.nan
    with pytest.raises(NonFiniteLossError) as info:
        combine(LossWeights(), *comps)
    assert info.value.term == name


@pytest.mark.parametrize("bad", [(-1, 40, 5), (1, math.inf, 5), (1, 40, math.nan)])
def test_weights_validated(bad):
    with pytest.raises(ValueError):
        LossWeights(*bad)


def test_weighted_total_is_differentiable():
    parts = [_t(v).requires_grad_(True) for v in (0.2, 0.3, 0.01, 0.05, 0.07)]
    weighted_total(LossWeights(), *parts).backward()
    assert [p.grad.item() for p in parts] == [1.0, 1.0, 40.0, 5.0, 5.0]


finite = st.floats(-2, 2, allow_nan=False, width=64)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_tc_symmetric_and_x_invariant(seed):
    rng = np.random.default_rng(seed)
    x, x2 = _t(rng.uniform(-1, 1, (3, 8, 8))), _t(rng.uniform(-1, 1, (3, 8, 8)))
    r1, r2 = _t(rng.uniform(-2, 2, (3, 8, 8))), _t(rng.uniform(-2, 2, (3, 8, 8)))
    v = target_consistency(x, r1, r2)
    assert v == target_consistency(x, r2, r1)
    assert v == target_consistency(x2, r1, r2)
    assert v >= 0


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=1, max_size=64), st.lists(finite, min_size=1, max_size=64))
def test_losses_non_negative(a, b):
    a, b = _t(a), _t(b)
    assert identity_loss(a) >= 0
    assert lsgan_generator_loss(a) >= 0
    assert lsgan_discriminator_loss(a, b) >= 0
