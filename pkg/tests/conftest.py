"""Shared fixtures: toy oracles and small numeric helpers.

Two oracle builders, tuned for different experiments:

* ``toy_edit_oracle`` -- all branches unit variance, the instruction branch
  shifted by a known offset. With matched local slopes the source-anchored
  baseline cancels almost all draw noise, which is what the variance
  comparisons rely on.
* ``attractor_edit_oracle`` -- a broad unconditional, a moderate source
  branch at A, and a *tight* instruction branch at B. The tight branch
  dominates the guided estimate, so edited particles settle near B instead
  of overshooting along the guidance direction.
"""
from __future__ import annotations

import numpy as np
import pytest

from csd.oracle import EditOracle, GaussianMixture

SRC = "src"
EDIT = "edit"


def fd_gradient(f, x, step=1e-6):
    """Central finite differences of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = step
        g[k] = (f(x + e) - f(x - e)) / (2.0 * step)
    return g


def single_gaussian(mean, var=1.0):
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    return GaussianMixture(
        weights=np.array([1.0]),
        means=mean[None, :],
        variances=np.full((1, mean.size), float(var)),
    )


def unit_gaussian(dim):
    return single_gaussian(np.zeros(dim))


def toy_edit_oracle(dim=4, shift=0.5, source_mean=0.25):
    """Equal-variance branches; the text branch is offset by ``shift`` along
    a fixed direction."""
    direction = np.zeros(dim)
    direction[0] = 1.0
    m_src = np.full(dim, float(source_mean))
    return EditOracle(
        unconditional=unit_gaussian(dim),
        image={SRC: single_gaussian(m_src)},
        image_text={(SRC, EDIT): single_gaussian(m_src + shift * direction)},
    )


def no_signal_oracle(dim=4, source_mean=0.25):
    """Text branch identical to the image branch: zero instruction signal."""
    m_src = np.full(dim, float(source_mean))
    branch = single_gaussian(m_src)
    return EditOracle(
        unconditional=unit_gaussian(dim),
        image={SRC: branch},
        image_text={(SRC, EDIT): branch},
    )


def attractor_edit_oracle(dim=2, a=(2.5, 0.0), b=(-2.5, 0.0), tight_var=0.25):
    """Broad prior, moderate source branch at ``a``, tight text branch at ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return EditOracle(
        unconditional=single_gaussian(np.zeros(dim), var=25.0),
        image={SRC: single_gaussian(a, var=4.0)},
        image_text={(SRC, EDIT): single_gaussian(b, var=tight_var)},
    )


def bimodal_edit_oracle(shape, depth=4.0):
    """Instruction branch with two modes at +-depth along a channel-0 pattern.

    Uncoupled particles commit to whichever mode their content leans toward;
    kernel mixing is the only consistency channel when patches are disjoint.
    """
    h, w, c = shape
    dim = h * w * c
    pattern = np.zeros(shape)
    pattern[:, :, 0] = 1.0
    pattern = (pattern / np.linalg.norm(pattern)).ravel()
    return EditOracle(
        unconditional=GaussianMixture([1.0], [np.zeros(dim)], [np.full(dim, 4.0)]),
        image={SRC: GaussianMixture([1.0], [np.zeros(dim)], [np.ones(dim)])},
        image_text={
            (SRC, EDIT): GaussianMixture(
                [0.5, 0.5], [depth * pattern, -depth * pattern], [np.ones(dim), np.ones(dim)]
            )
        },
    )


def channel0_pattern(shape):
    """The unit-norm channel-0 indicator used by the bimodal fixtures."""
    pattern = np.zeros(shape)
    pattern[:, :, 0] = 1.0
    return pattern / np.linalg.norm(pattern)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
