"""Dense-matrix kernels, Adam, and a central finite-difference gradient oracle.

Matrices are plain ``numpy.ndarray`` objects (float64 unless a caller opts
into float32). Kernels that the model calls on stacked batches accept any
leading batch axes and operate on the last one or two axes.
"""

from dataclasses import dataclass, replace

import numpy as np

from sensorcal.errors import DimensionError, NumericError

DEFAULT_DTYPE = np.float64
LAYER_NORM_EPS = 1e-5


def as_matrix(x, dtype=DEFAULT_DTYPE):
    m = np.asarray(x, dtype=dtype)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def check_finite(x, what="value"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite {what}")
    return x


def matmul(a, b):
    """Product of an (m, k) and a (k, n) matrix.

    The k-axis is accumulated strictly left to right, so results are
    bitwise reproducible regardless of the BLAS build.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return check_finite(out, "matmul result")


def softmax_rows(m):
    """Softmax over the last axis with per-row max subtraction."""
    m = np.asarray(m)
    m = m.astype(np.result_type(m, np.float32), copy=False)
    check_finite(m, "softmax input")
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad_out, probs):
    # row-wise Jacobian-vector product: p * (g - <g, p>)
    inner = (grad_out * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_out - inner)


def layer_norm(m, gain, bias, eps=LAYER_NORM_EPS):
    """Normalize every row of ``m`` over its last axis, then scale and shift."""
    out, _ = layer_norm_forward(m, gain, bias, eps)
    return out


def layer_norm_forward(m, gain, bias, eps=LAYER_NORM_EPS):
    if eps <= 0:
        raise ValueError("eps must be positive")
    m = np.asarray(m)
    d = m.shape[-1]
    gain = np.asarray(gain).reshape(-1)
    bias = np.asarray(bias).reshape(-1)
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"gain {gain.shape} / bias {bias.shape} do not match feature width {d}")
    mean = m.mean(axis=-1, keepdims=True)
    centered = m - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gain + bias, (xhat, inv_std, gain)


def layer_norm_backward(grad_out, cache):
    """Returns (grad_input, grad_gain, grad_bias); parameter grads summed over all rows."""
    xhat, inv_std, gain = cache
    d = xhat.shape[-1]
    lead = tuple(range(xhat.ndim - 1))
    grad_gain = (grad_out * xhat).sum(axis=lead)
    grad_bias = grad_out.sum(axis=lead)
    g = grad_out * gain
    grad_in = inv_std * (
        g - g.sum(axis=-1, keepdims=True) / d - xhat * (g * xhat).sum(axis=-1, keepdims=True) / d
    )
    return grad_in, grad_gain.reshape(1, d), grad_bias.reshape(1, d)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, param, **hyper):
        z = np.zeros_like(np.asarray(param, dtype=DEFAULT_DTYPE))
        return cls(m=z, v=z.copy(), **hyper)


def adam_step(param, grad, state):
    """One bias-corrected Adam update. Inputs are not mutated."""
    param = np.asarray(param)
    grad = np.asarray(grad)
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise DimensionError(
            f"adam shapes disagree: param {param.shape}, grad {grad.shape}, moments {state.m.shape}"
        )
    check_finite(grad, "gradient")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_param = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_param, replace(state, m=m, v=v, t=t)


def finite_diff_grad(f, theta, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``theta`` (any shape)."""
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.array(theta, dtype=DEFAULT_DTYPE)
    flat = theta.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(theta))
        flat[i] = orig - h
        fm = float(f(theta))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite objective at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(theta.shape)


def glorot_uniform(rng, shape, fan_in=None, fan_out=None):
    fan_in = shape[0] if fan_in is None else fan_in
    fan_out = shape[-1] if fan_out is None else fan_out
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
