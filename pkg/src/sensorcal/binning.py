"""Bin layouts over a window of ``n`` tokens and learnable per-bin pooling.

Token indices are 1-based and run oldest (1) to newest (n). A layout is a
boundary vector ``alpha`` of length z+1 with ``alpha[0] == 1`` and
``alpha[z] == n + 1``; bin j (1-based) covers tokens alpha[j-1] .. alpha[j]-1.

In log mode the newest token sits alone in its own bin and widths double
going back in time, with the oldest bin absorbing whatever remains.
"""

import math
from dataclasses import dataclass

import numpy as np

from sensorcal.errors import DimensionError, WindowTooSmallError

LOG = "log"
UNIFORM = "uniform"


@dataclass(frozen=True)
class BinLayout:
    n: int
    z: int
    alpha: tuple
    mode: str = LOG

    @property
    def widths(self):
        return tuple(b - a for a, b in zip(self.alpha[:-1], self.alpha[1:]))

    def slices(self):
        """0-based half-open token slices, oldest bin first."""
        return [slice(a - 1, b - 1) for a, b in zip(self.alpha[:-1], self.alpha[1:])]

    def bin_of_token(self):
        return np.repeat(np.arange(self.z), self.widths)

    def rows(self):
        """(j, first token, last token, width) for each bin, 1-based."""
        return [(j + 1, a, b - 1, b - a) for j, (a, b) in enumerate(zip(self.alpha[:-1], self.alpha[1:]))]

    def to_dict(self):
        return {
            "n": self.n,
            "z": self.z,
            "mode": self.mode,
            "alpha": list(self.alpha),
            "widths": list(self.widths),
        }


def log_bin_count(n):
    return math.ceil(math.log2(n))


def bin_layout(n):
    """Logarithmic layout for a window of ``n`` tokens."""
    if n < 2:
        raise WindowTooSmallError(f"window of {n} token(s) cannot be binned; need n >= 2")
    z = log_bin_count(n)
    alpha = [max(1, n - 2 ** (z - j) + 2) for j in range(z + 1)]
    # an exact power of two would otherwise start at token 2 and drop the oldest reading
    alpha[0] = 1
    return BinLayout(n=n, z=z, alpha=tuple(alpha), mode=LOG)


def uniform_layout(n, z):
    """``z`` contiguous bins of near-equal width; leftover tokens go to the oldest bins."""
    if not 1 <= z <= n:
        raise DimensionError(f"uniform layout needs 1 <= z <= n, got z={z}, n={n}")
    base, extra = divmod(n, z)
    widths = [base + 1 if j < extra else base for j in range(z)]
    alpha = np.concatenate([[1], 1 + np.cumsum(widths)]).astype(int)
    return BinLayout(n=n, z=z, alpha=tuple(int(a) for a in alpha), mode=UNIFORM)


def make_layout(n, mode=LOG, z=None):
    if mode == LOG:
        return bin_layout(n)
    if mode == UNIFORM:
        if n < 2:
            raise WindowTooSmallError(f"window of {n} token(s) cannot be binned; need n >= 2")
        return uniform_layout(n, log_bin_count(n) if z is None else z)
    raise ValueError(f"unknown binning mode {mode!r}")


def mean_weights(layout):
    """Per-bin weight vectors equal to 1/width, i.e. a plain per-bin average."""
    return [np.full(w, 1.0 / w) for w in layout.widths]


def split_weights(flat, layout):
    """View a flat length-n weight vector as per-bin vectors."""
    flat = np.asarray(flat).reshape(-1)
    if flat.size != layout.n:
        raise DimensionError(f"expected {layout.n} bin weights, got {flat.size}")
    return [flat[s] for s in layout.slices()]


def _check(e, layout, w):
    if e.shape[-2] != layout.n:
        raise DimensionError(f"embedding has {e.shape[-2]} tokens, layout expects {layout.n}")
    if len(w) != layout.z:
        raise DimensionError(f"expected {layout.z} bin weight vectors, got {len(w)}")
    for j, (wj, width) in enumerate(zip(w, layout.widths)):
        if np.shape(wj) != (width,):
            raise DimensionError(f"bin {j + 1} weight has shape {np.shape(wj)}, width is {width}")


def apply_binning(e, layout, w):
    """Pool token rows of ``e`` (..., n, d) into bin rows (..., z, d).

    Bin j is the weighted sum of its token rows with weights ``w[j]``.
    """
    e = np.asarray(e)
    _check(e, layout, w)
    out = np.empty(e.shape[:-2] + (layout.z, e.shape[-1]), dtype=np.result_type(e, w[0]))
    for j, sl in enumerate(layout.slices()):
        out[..., j, :] = np.einsum("...id,i->...d", e[..., sl, :], w[j])
    return out


def binning_backward(grad_out, e, layout, w):
    """Adjoint of :func:`apply_binning`.

    Returns ``(grad_e, grad_w)``; ``grad_w`` is a list of per-bin vectors,
    summed over any leading batch axes.
    """
    e = np.asarray(e)
    grad_out = np.asarray(grad_out)
    _check(e, layout, w)
    if grad_out.shape != e.shape[:-2] + (layout.z, e.shape[-1]):
        raise DimensionError(f"grad_out shape {grad_out.shape} does not match binned output")
    grad_e = np.empty_like(e, dtype=np.result_type(e, grad_out))
    grad_w = []
    for j, sl in enumerate(layout.slices()):
        g = grad_out[..., j : j + 1, :]
        grad_e[..., sl, :] = w[j][:, None] * g
        eb = e[..., sl, :].reshape(-1, sl.stop - sl.start, e.shape[-1])
        grad_w.append(np.einsum("bid,bd->i", eb, grad_out[..., j, :].reshape(-1, e.shape[-1])))
    return grad_e, grad_w
