import math
from fractions import Fraction

import numpy as np


def nearest_rank_index(n, q):
    """0-based index of the nearest-rank ``q``-quantile (``q`` in [0, 1]) of ``n`` sorted values.

    The rank is ``ceil(q * n)`` evaluated in exact rational arithmetic so
    that e.g. ``0.95 * 20`` is exactly 19.
    """
    if n < 1:
        raise ValueError("need at least one value")
    rank = math.ceil(Fraction(str(q)) * n)
    return min(max(rank, 1), n) - 1


def nearest_rank(values, q):
    values = np.sort(np.asarray(values, dtype=np.float64).ravel())
    return float(values[nearest_rank_index(values.size, q)])
