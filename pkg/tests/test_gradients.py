"""Analytic gradients against central finite differences.

Batch norm centers pre-activations at zero, so at step 1e-4 the FD stencil
occasionally crosses a ReLU kink, where central differences do not
estimate the derivative; such instances are detected by activation-region
signatures and replaced with the next derived instance (see helpers).
"""

import numpy as np
import pytest

from tmlab import model as M

from helpers import gradcheck_clean_seed, gradcheck_instance, loss_and_region


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    worst = gradcheck_clean_seed(seed)
    assert worst < 1e-3


def test_zero_weights_give_zero_gradients():
    params, batch, _ = gradcheck_instance(0)
    _, _, cache = loss_and_region(params, batch, np.zeros(batch.size))
    grads = M.backward_batch(params, cache, batch.labels, 1.0,
                             weights=np.zeros(batch.size))
    for name in M.PARAM_NAMES:
        assert not grads[name].any()


def test_duplicated_batch_same_gradient():
    params, batch, weights = gradcheck_instance(3)
    _, _, cache = loss_and_region(params, batch, weights)
    g1 = M.backward_batch(params, cache, batch.labels, 1.0, weights=weights)

    doubled = M.Batch(
        pixels=np.concatenate([batch.pixels, batch.pixels]),
        days=np.concatenate([batch.days, batch.days]),
        tmask=np.concatenate([batch.tmask, batch.tmask]),
        pmask=np.concatenate([batch.pmask, batch.pmask]),
        labels=np.concatenate([batch.labels, batch.labels]),
    )
    _, cache2 = M.forward_batch(params, doubled, 3, "source", train=True,
                                update_running=False, want_cache=True)
    g2 = M.backward_batch(params, cache2, doubled.labels, 1.0,
                          weights=np.concatenate([weights, weights]))
    for name in M.PARAM_NAMES:
        assert g2[name] == pytest.approx(g1[name], rel=1e-9, abs=1e-12)


def test_gamma_zero_gradcheck():
    worst = gradcheck_clean_seed(11, gamma=0.0)
    assert worst < 1e-3
