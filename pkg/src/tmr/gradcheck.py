"""Finite-difference gradient checks and per-example gradient norms."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .model import discriminator_loss, forward_discriminator


def analytic_grads(loss_fn, tensors):
    """Gradients of ``loss_fn()`` w.r.t. ``tensors`` (zeros where unreached)."""
    with ag.Tape() as tape:
        loss = loss_fn()
    leaves = tape.gradients(loss)
    return [leaves.get(id(t), np.zeros_like(t.data)) for t in tensors]


def numeric_grad(loss_fn, tensor, h=1e-5):
    """Central differences over every element of ``tensor``."""
    g = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(loss_fn().data)
        flat[i] = old - h
        fm = float(loss_fn().data)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


ABS_FLOOR = 1e-8


def relative_error(analytic, numeric, floor=ABS_FLOOR):
    """max|a - n| / max(max|a|, max|n|, floor).

    The floor keeps a tensor whose true gradient is identically zero (e.g. a
    generator weight under the discriminator loss) from reporting rounding
    noise divided by rounding noise.
    """
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(loss_fn, named_tensors, h=1e-5):
    """Per-tensor relative error of analytic vs central-difference gradients.

    ``named_tensors`` maps names to Tensors. Returns ``{name: (error, analytic)}``.
    """
    names = list(named_tensors)
    tensors = [named_tensors[k] for k in names]
    analytic = analytic_grads(loss_fn, tensors)
    report = {}
    for name, t, a in zip(names, tensors, analytic):
        report[name] = (relative_error(a, numeric_grad(loss_fn, t, h)), a)
    return report


def per_example_grad_norms(params, batch, scale=1.0):
    """Norm of each example's discriminator gradient, one backward per example.

    The gradient is of that example's discriminator loss (times ``scale``) w.r.t.
    every discriminator parameter including the shared embedding table.
    Returns ``(norms, grads)`` where ``grads[i]`` maps names to arrays.
    """
    names = params.discriminator_names()
    tensors = params.tensors(names)
    norms, all_grads = [], []
    for ex in batch:
        with ag.Tape() as tape:
            _, per_ex = discriminator_loss(forward_discriminator(params, [ex]))
            loss = ag.scale(ag.sum_all(per_ex), scale)
        leaves = tape.gradients(loss)
        grads = {k: leaves.get(id(t), np.zeros_like(t.data)) for k, t in zip(names, tensors)}
        sq = sum(float(np.vdot(g, g)) for g in grads.values())
        norms.append(np.sqrt(sq))
        all_grads.append(grads)
    return np.array(norms), all_grads
