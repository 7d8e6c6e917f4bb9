from __future__ import annotations

from typing import Sequence

import numpy as np

from ..nn import ParamVector, ShapeError


def fedavg_aggregate(thetas: Sequence[ParamVector | np.ndarray]) -> ParamVector | np.ndarray:
    """Element-wise mean of equally shaped parameter vectors.

    Returns a :class:`ParamVector` when given ParamVectors, else an array.
    """
    if len(thetas) == 0:
        raise ValueError("cannot aggregate an empty list")
    first = thetas[0]
    arrays = [np.asarray(t.values if isinstance(t, ParamVector) else t, dtype=np.float64) for t in thetas]
    shape = arrays[0].shape
    for k, a in enumerate(arrays):
        if a.shape != shape:
            raise ShapeError(f"theta {k} has shape {a.shape}, expected {shape}")
        if isinstance(first, ParamVector) and isinstance(thetas[k], ParamVector) and thetas[k].specs != first.specs:
            raise ShapeError(f"theta {k} has a different layer layout")
    mean = np.mean(np.stack(arrays), axis=0)
    return ParamVector(mean, first.specs) if isinstance(first, ParamVector) else mean
