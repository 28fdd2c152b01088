"""Meta-learner as a shared trunk plus a per-task N-way head.

The trunk is every layer of a classifier except the last.  Each task gets
a fresh head: either all zeros, or a prototype head whose logits equal
``-s/2 * ||h - mu_c||^2`` up to a per-row constant, with ``mu_c`` the
(soft-)label weighted class means of trunk features ``h``.
"""

from __future__ import annotations

import numpy as np

from . import nets


def head_size(spec):
    return spec.param_count() - spec.head_offset()


def trunk(params, spec):
    return params[:spec.head_offset()]


def with_head(state, head, class_labels=()):
    spec = state.spec
    params = np.concatenate([trunk(state.params, spec), head])
    return nets.NetworkState(spec, params, class_labels)


def zero_head(spec):
    return np.zeros(head_size(spec))


def prototype_head(state, x, targets, temperature=1.0):
    """Head built from class means of trunk features.

    ``targets`` is either integer labels ``[B]`` or soft labels ``[B x N]``.
    """
    spec = state.spec
    n = spec.output_dim
    h = nets.features(state, x)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        weights = np.zeros((len(targets), n))
        weights[np.arange(len(targets)), targets] = 1.0
    else:
        weights = targets
    mass = weights.sum(axis=0)
    mu = (weights.T @ h) / np.maximum(mass, 1e-12)[:, None]
    within = (weights * ((h[:, None, :] - mu[None]) ** 2).sum(-1)).sum() / max(weights.sum(), 1e-12)
    s = temperature * 2.0 / max(within, 1e-8)
    w = s * mu.T
    b = -0.5 * s * (mu ** 2).sum(axis=1)
    return np.concatenate([w.ravel(), b])


def make_head(kind, state, x, targets, temperature=1.0):
    if kind == "zero":
        return zero_head(state.spec)
    if kind == "prototype":
        return prototype_head(state, x, targets, temperature)
    raise ValueError(f"unknown head kind {kind!r}")
