"""Optimizer inner loops: compiled extension when available, NumPy otherwise.

Set ``GRADMIRROR_PURE_PYTHON=1`` to force the fallback.  ``BACKEND`` names the
implementation that was selected at import time.
"""

from __future__ import annotations

import os

import numpy as np

f32 = np.float32


def adamw_update_py(p, graw, m, v, scale, lr, b1, omb1, b2, omb2, bc1, bc2, eps, wd):
    if not (p.shape == graw.shape == m.shape == v.shape):
        raise ValueError("adamw_update: array lengths differ")
    g = graw * f32(scale)
    np.multiply(m, f32(b1), out=m)
    m += f32(omb1) * g
    np.multiply(v, f32(b2), out=v)
    v += f32(omb2) * (g * g)
    mhat = m / f32(bc1)
    vhat = v / f32(bc2)
    denom = np.sqrt(vhat)
    denom += f32(eps)
    upd = mhat / denom
    upd += f32(wd) * p
    upd *= f32(lr)
    p -= upd


def sgd_update_py(p, graw, vel, scale, lr, momentum):
    if not (p.shape == graw.shape == vel.shape):
        raise ValueError("sgd_update: array lengths differ")
    g = graw * f32(scale)
    np.multiply(vel, f32(momentum), out=vel)
    vel += g
    p -= f32(lr) * vel


adamw_update = adamw_update_py
sgd_update = sgd_update_py
BACKEND = "python"

if not os.environ.get("GRADMIRROR_PURE_PYTHON"):
    try:
        from . import _kernels
    except ImportError:  # extension not built
        _kernels = None
    if _kernels is not None:
        adamw_update = _kernels.adamw_update
        sgd_update = _kernels.sgd_update
        BACKEND = "compiled"
