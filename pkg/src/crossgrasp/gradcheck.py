"""Parameter-level gradient verification for whole networks.

Complements :func:`crossgrasp.autodiff.finite_difference_check` (which
perturbs a single input tensor) by sampling coordinates across a network's
parameter set.  Run it on a float64 twin of the network (``to_double``) so
central differences are trustworthy at 1e-4 relative error.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, backward
from .nn import ParameterSet


def check_param_gradients(params: ParameterSet, loss_fn, n_coords: int = 20,
                          seed: int = 0, h: float = 1e-4) -> float:
    """Max relative error of tape gradients over random parameter coordinates.

    ``loss_fn`` must deterministically rebuild the scalar loss from the
    current parameter values (it is re-evaluated off-tape for the central
    differences).
    """
    with Tape() as tape:
        loss = loss_fn()
    grad_map = backward(loss, tape)

    rng = np.random.default_rng(seed)
    names = params.names()
    worst = 0.0
    for _ in range(n_coords):
        name = names[int(rng.integers(len(names)))]
        t = params[name]
        i = int(rng.integers(t.size))
        flat = t.data.ravel()
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn().data.item()
        flat[i] = orig - h
        fm = loss_fn().data.item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        g = grad_map.get(t.node_id)
        analytic = float(g.data.ravel()[i]) if g is not None else 0.0
        err = abs(analytic - numeric) / (abs(numeric) + 1e-8)
        worst = max(worst, err)
    return worst
