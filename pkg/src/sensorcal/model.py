"""Calibration models: log-binned attention ("tesla") and four baselines.

Every variant maps a window of ``n`` readings (oldest first) to one scalar.
Forward functions take a batch ``s`` of shape (B, n) (a single (n,) window
is promoted) and return predictions of shape (B,) plus a cache; backward
functions take d(loss)/d(prediction) of shape (B,) and return a gradient
for every entry of the parameter dict, summed over the batch.

Parameters live in a flat ``dict[str, ndarray]``. Weight matrices are
stored (fan_in, fan_out) so a layer is ``x @ w``.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from sensorcal import binning
from sensorcal.errors import DataError, DimensionError, NumericError
from sensorcal.numerics import (
    LAYER_NORM_EPS,
    glorot_uniform,
    layer_norm_backward,
    layer_norm_forward,
    softmax_backward,
    softmax_rows,
)

VARIANTS = ("tesla", "linear", "nlinear", "dlinear", "transformer")
EMBEDDINGS = ("local", "local_global")
AGGREGATORS = ("linear", "ffn")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "tesla"
    n: int = 60
    d: int = 64
    heads: int = 4
    binning: str = "log"
    embedding: str = "local_global"
    aggregator: str = "linear"
    z: int | None = None  # uniform binning only; defaults to ceil(log2 n)
    embedding_bias: bool = False
    dlinear_kernel: int = 25

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.n < 2:
            raise binning.WindowTooSmallError(f"window length must be >= 2, got {self.n}")
        if self.variant in ("tesla", "transformer") and self.d % self.heads:
            raise DimensionError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.binning not in (binning.LOG, binning.UNIFORM):
            raise ValueError(f"unknown binning mode {self.binning!r}")
        if self.embedding not in EMBEDDINGS:
            raise ValueError(f"unknown embedding mode {self.embedding!r}")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")

    @property
    def layout(self):
        return binning.make_layout(self.n, self.binning, self.z)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


# -- shared layers -----------------------------------------------------------


def _as_batch(s):
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 1:
        return s[None, :], True
    if s.ndim != 2:
        raise DimensionError(f"windows must be (n,) or (B, n), got {s.shape}")
    return s, False


def _wgrad(x, dy):
    """Gradient of ``x @ w`` wrt ``w``, summed over all leading axes."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _bgrad(dy):
    return dy.reshape(-1, dy.shape[-1]).sum(axis=0, keepdims=True)


def _split_heads(x, heads):
    *lead, t, d = x.shape
    return x.reshape(*lead, t, heads, d // heads).swapaxes(-3, -2)


def _merge_heads(x):
    *lead, h, t, dh = x.shape
    return x.swapaxes(-3, -2).reshape(*lead, t, h * dh)


def mha_forward(x, wq, wk, wv, heads):
    """Unmasked multi-head self-attention over the token axis of ``x`` (..., t, d)."""
    d = x.shape[-1]
    if d % heads:
        raise DimensionError(f"d={d} is not divisible by heads={heads}")
    dh = d // heads
    q = _split_heads(x @ wq, heads)
    k = _split_heads(x @ wk, heads)
    v = _split_heads(x @ wv, heads)
    probs = softmax_rows(q @ k.swapaxes(-1, -2) / np.sqrt(dh))
    y = _merge_heads(probs @ v)
    return y, (x, q, k, v, probs, heads)


def mha_backward(dy, cache, wq, wk, wv):
    x, q, k, v, probs, heads = cache
    dh = q.shape[-1]
    do = _split_heads(dy, heads)
    dprobs = do @ v.swapaxes(-1, -2)
    dv = probs.swapaxes(-1, -2) @ do
    dscores = softmax_backward(dprobs, probs) / np.sqrt(dh)
    dq = _merge_heads(dscores @ k)
    dk = _merge_heads(dscores.swapaxes(-1, -2) @ q)
    dv = _merge_heads(dv)
    dx = dq @ wq.T + dk @ wk.T + dv @ wv.T
    return dx, _wgrad(x, dq), _wgrad(x, dk), _wgrad(x, dv)


def ffn_forward(x, w1, b1, w2, b2):
    pre = x @ w1 + b1
    hidden = np.maximum(pre, 0.0)
    return hidden @ w2 + b2, (x, pre, hidden)


def ffn_backward(dy, cache, w1, w2):
    x, pre, hidden = cache
    dhidden = dy @ w2.T
    dpre = dhidden * (pre > 0)
    return dpre @ w1.T, _wgrad(x, dpre), _bgrad(dpre), _wgrad(hidden, dy), _bgrad(dy)


# -- log-binned attention model ---------------------------------------------


def embed_multiview(s, params, embedding="local_global"):
    """Token embeddings (B, n, d): each reading times a local vector, plus a
    window-wide global vector shared by every token."""
    s, single = _as_batch(s)
    w_local = params["w_local"]
    if "w_global" in params and s.shape[1] != params["w_global"].shape[0]:
        raise DimensionError(f"window has {s.shape[1]} readings, model expects {params['w_global'].shape[0]}")
    e = s[:, :, None] * w_local[0]
    if embedding == "local_global":
        e = e + (s @ params["w_global"])[:, None, :]
    if "b_emb" in params:
        e = e + params["b_emb"][0]
    return e[0] if single else e


def binned_attention(ebar, params, heads):
    y, _ = mha_forward(np.asarray(ebar), params["w_q"], params["w_k"], params["w_v"], heads)
    return y


def aggregate(y, params):
    """Feature-wise reduction of the attention output (..., z, d) to a scalar per sample."""
    normed, _ = layer_norm_forward(y, params["ln_gain"], params["ln_bias"], LAYER_NORM_EPS)
    per_bin = (normed @ params["w_agg1"])[..., 0]
    if per_bin.shape[-1] != params["w_agg2"].shape[0]:
        raise DimensionError(f"{per_bin.shape[-1]} bins but w_agg2 has {params['w_agg2'].shape[0]} rows")
    return per_bin @ params["w_agg2"][:, 0]


def tesla_forward(s, params, config):
    s, single = _as_batch(s)
    if s.shape[1] != config.n:
        raise DimensionError(f"window has {s.shape[1]} readings, model expects {config.n}")
    layout = config.layout
    cache = {"s": s, "layout": layout}
    e = embed_multiview(s, params, config.embedding)
    w_bins = binning.split_weights(params["w_bin"], layout)
    ebar = binning.apply_binning(e, layout, w_bins)
    y, cache["mha"] = mha_forward(ebar, params["w_q"], params["w_k"], params["w_v"], config.heads)
    normed, cache["ln"] = layer_norm_forward(y, params["ln_gain"], params["ln_bias"], LAYER_NORM_EPS)
    cache.update(e=e, w_bins=w_bins, normed=normed)
    if config.aggregator == "linear":
        per_bin = (normed @ params["w_agg1"])[..., 0]
        cache["per_bin"] = per_bin
        pred = per_bin @ params["w_agg2"][:, 0]
    else:
        out, cache["ffn"] = ffn_forward(
            normed, params["ffn_w1"], params["ffn_b1"], params["ffn_w2"], params["ffn_b2"]
        )
        last = out[:, -1, :]
        cache["last"] = last
        pred = last @ params["head_w"][:, 0] + params["head_b"][0, 0]
    return (pred[0] if single else pred), cache


def tesla_backward_from_cache(grad_pred, cache, params, config):
    grad_pred = np.atleast_1d(np.asarray(grad_pred, dtype=np.float64))
    s, layout = cache["s"], cache["layout"]
    grads = {}
    normed = cache["normed"]
    if config.aggregator == "linear":
        grads["w_agg2"] = (cache["per_bin"] * grad_pred[:, None]).sum(axis=0)[:, None]
        dper_bin = grad_pred[:, None] * params["w_agg2"][:, 0]
        grads["w_agg1"] = np.einsum("bzd,bz->d", normed, dper_bin)[:, None]
        dnormed = dper_bin[:, :, None] * params["w_agg1"][:, 0]
    else:
        grads["head_w"] = (cache["last"] * grad_pred[:, None]).sum(axis=0)[:, None]
        grads["head_b"] = np.array([[grad_pred.sum()]])
        dout = np.zeros_like(normed)
        dout[:, -1, :] = grad_pred[:, None] * params["head_w"][:, 0]
        dnormed, grads["ffn_w1"], grads["ffn_b1"], grads["ffn_w2"], grads["ffn_b2"] = ffn_backward(
            dout, cache["ffn"], params["ffn_w1"], params["ffn_w2"]
        )
    dy, grads["ln_gain"], grads["ln_bias"] = layer_norm_backward(dnormed, cache["ln"])
    debar, grads["w_q"], grads["w_k"], grads["w_v"] = mha_backward(
        dy, cache["mha"], params["w_q"], params["w_k"], params["w_v"]
    )
    de, dw_bins = binning.binning_backward(debar, cache["e"], layout, cache["w_bins"])
    grads["w_bin"] = np.concatenate(dw_bins)
    grads["w_local"] = np.einsum("bn,bnd->d", s, de)[None, :]
    if config.embedding == "local_global":
        grads["w_global"] = s.T @ de.sum(axis=1)
    if config.embedding_bias:
        grads["b_emb"] = de.sum(axis=(0, 1))[None, :]
    return grads


def tesla_backward(s, target, params, config):
    """Gradients of 0.5 * (prediction - target)**2, summed over the batch."""
    pred, cache = tesla_forward(s, params, config)
    return tesla_backward_from_cache(np.atleast_1d(pred) - np.atleast_1d(target), cache, params, config)


# -- baselines ---------------------------------------------------------------


def moving_average_matrix(n, kernel):
    """(n, n) operator T with trend = s @ T.T; the series is edge-padded."""
    half = (kernel - 1) // 2
    t = np.zeros((n, n))
    for i in range(n):
        for m in range(i - half, i - half + kernel):
            t[i, min(max(m, 0), n - 1)] += 1.0 / kernel
    return t


def _transformer_forward(s, params, config):
    cache = {"s": s}
    tokens = s[:, :, None] * params["w_tok"][0] + params["b_tok"][0] + params["pos"]
    att, cache["mha"] = mha_forward(tokens, params["w_q"], params["w_k"], params["w_v"], config.heads)
    proj = att @ params["w_o"]
    h1, cache["ln1"] = layer_norm_forward(tokens + proj, params["ln1_gain"], params["ln1_bias"])
    f, cache["ffn"] = ffn_forward(h1, params["ffn_w1"], params["ffn_b1"], params["ffn_w2"], params["ffn_b2"])
    h2, cache["ln2"] = layer_norm_forward(h1 + f, params["ln2_gain"], params["ln2_bias"])
    cache.update(att=att, last=h2[:, -1, :])
    return cache["last"] @ params["head_w"][:, 0] + params["head_b"][0, 0], cache


def _transformer_backward(g, cache, params):
    s = cache["s"]
    grads = {
        "head_w": (cache["last"] * g[:, None]).sum(axis=0)[:, None],
        "head_b": np.array([[g.sum()]]),
    }
    dh2 = np.zeros(cache["att"].shape)
    dh2[:, -1, :] = g[:, None] * params["head_w"][:, 0]
    dsum2, grads["ln2_gain"], grads["ln2_bias"] = layer_norm_backward(dh2, cache["ln2"])
    dh1, grads["ffn_w1"], grads["ffn_b1"], grads["ffn_w2"], grads["ffn_b2"] = ffn_backward(
        dsum2, cache["ffn"], params["ffn_w1"], params["ffn_w2"]
    )
    dh1 = dh1 + dsum2
    dsum1, grads["ln1_gain"], grads["ln1_bias"] = layer_norm_backward(dh1, cache["ln1"])
    grads["w_o"] = _wgrad(cache["att"], dsum1)
    datt = dsum1 @ params["w_o"].T
    dtok, grads["w_q"], grads["w_k"], grads["w_v"] = mha_backward(
        datt, cache["mha"], params["w_q"], params["w_k"], params["w_v"]
    )
    dtok = dtok + dsum1
    grads["pos"] = dtok.sum(axis=0)
    grads["b_tok"] = dtok.sum(axis=(0, 1))[None, :]
    grads["w_tok"] = np.einsum("bn,bnd->d", s, dtok)[None, :]
    return grads


def baseline_forward(variant, s, params, config=None):
    """Prediction of a baseline variant; ``config`` is needed for dlinear/transformer."""
    pred, _ = _baseline_forward(variant, s, params, config)
    return pred


def _baseline_forward(variant, s, params, config):
    s, single = _as_batch(s)
    n = s.shape[1]
    cache = {"s": s}
    if variant in ("linear", "nlinear", "dlinear"):
        ref = params["w"] if variant != "dlinear" else params["w_trend"]
        if ref.shape[0] != n:
            raise DimensionError(f"window has {n} readings, model expects {ref.shape[0]}")
    if variant == "linear":
        pred = s @ params["w"][:, 0] + params["b"][0, 0]
    elif variant == "nlinear":
        last = s[:, -1]
        pred = (s - last[:, None]) @ params["w"][:, 0] + params["b"][0, 0] + last
    elif variant == "dlinear":
        kernel = config.dlinear_kernel if config is not None else 25
        trend = s @ moving_average_matrix(n, kernel).T
        resid = s - trend
        cache.update(trend=trend, resid=resid, kernel=kernel)
        pred = trend @ params["w_trend"][:, 0] + resid @ params["w_resid"][:, 0] + params["b"][0, 0]
    elif variant == "transformer":
        if config is None:
            raise ValueError("transformer baseline needs a ModelConfig for its head count")
        if params["pos"].shape[0] != n:
            raise DimensionError(f"window has {n} readings, model expects {params['pos'].shape[0]}")
        pred, cache = _transformer_forward(s, params, config)
    else:
        raise ValueError(f"unknown baseline variant {variant!r}")
    return (pred[0] if single else pred), cache


def _baseline_backward(variant, g, cache, params):
    s = cache["s"]
    if variant == "linear":
        return {"w": (s.T @ g)[:, None], "b": np.array([[g.sum()]])}
    if variant == "nlinear":
        return {"w": ((s - s[:, -1:]).T @ g)[:, None], "b": np.array([[g.sum()]])}
    if variant == "dlinear":
        return {
            "w_trend": (cache["trend"].T @ g)[:, None],
            "w_resid": (cache["resid"].T @ g)[:, None],
            "b": np.array([[g.sum()]]),
        }
    return _transformer_backward(g, cache, params)


# -- parameters --------------------------------------------------------------


def param_shapes(config):
    n, d = config.n, config.d
    if config.variant in ("linear", "nlinear"):
        return {"w": (n, 1), "b": (1, 1)}
    if config.variant == "dlinear":
        return {"w_trend": (n, 1), "w_resid": (n, 1), "b": (1, 1)}
    ffn = {"ffn_w1": (d, 4 * d), "ffn_b1": (1, 4 * d), "ffn_w2": (4 * d, d), "ffn_b2": (1, d)}
    head = {"head_w": (d, 1), "head_b": (1, 1)}
    if config.variant == "transformer":
        return {
            "w_tok": (1, d), "b_tok": (1, d), "pos": (n, d),
            "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
            "ln1_gain": (1, d), "ln1_bias": (1, d),
            **ffn,
            "ln2_gain": (1, d), "ln2_bias": (1, d),
            **head,
        }  # fmt: skip
    shapes = {"w_local": (1, d)}
    if config.embedding == "local_global":
        shapes["w_global"] = (n, d)
    if config.embedding_bias:
        shapes["b_emb"] = (1, d)
    shapes.update({"w_bin": (n,), "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "ln_gain": (1, d), "ln_bias": (1, d)})
    if config.aggregator == "linear":
        shapes.update({"w_agg1": (d, 1), "w_agg2": (config.layout.z, 1)})
    else:
        shapes.update({**ffn, **head})
    return shapes


def init_params(config, seed=0):
    """Glorot-uniform weights, zero biases, unit LayerNorm gains, mean-pooling bin weights."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name == "w_bin":
            params[name] = np.concatenate(binning.mean_weights(config.layout))
        elif name.endswith("_gain"):
            params[name] = np.ones(shape)
        elif name.startswith("b") or name.endswith(("_b", "_bias")) or name.startswith("ffn_b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = glorot_uniform(rng, shape)
    return params


# -- model object and checkpoints -------------------------------------------


@dataclass
class Standardizer:
    x_mean: float = 0.0
    x_std: float = 1.0
    y_mean: float = 0.0
    y_std: float = 1.0

    @classmethod
    def fit(cls, windows, targets):
        windows = np.asarray(windows, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        x_std = float(windows.std()) or 1.0
        y_std = float(targets.std()) or 1.0
        return cls(float(windows.mean()), x_std, float(targets.mean()), y_std)

    def inputs(self, windows):
        return (np.asarray(windows, dtype=np.float64) - self.x_mean) / self.x_std

    def targets(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def restore(self, pred):
        return np.asarray(pred) * self.y_std + self.y_mean


@dataclass
class CalibrationModel:
    config: ModelConfig
    params: dict
    scaler: Standardizer = field(default_factory=Standardizer)

    @classmethod
    def create(cls, config, seed=0, scaler=None):
        return cls(config, init_params(config, seed), scaler or Standardizer())

    @property
    def variant(self):
        return self.config.variant

    def n_params(self):
        return int(sum(np.size(p) for p in self.params.values()))

    def forward(self, s):
        """Forward pass on standardized windows; returns (pred, cache)."""
        if self.variant == "tesla":
            return tesla_forward(s, self.params, self.config)
        return _baseline_forward(self.variant, s, self.params, self.config)

    def backward(self, grad_pred, cache):
        g = np.atleast_1d(np.asarray(grad_pred, dtype=np.float64))
        if self.variant == "tesla":
            return tesla_backward_from_cache(g, cache, self.params, self.config)
        return _baseline_backward(self.variant, g, cache, self.params)

    def loss_and_grads(self, s, y):
        """Mean of 0.5 * residual**2 over the batch and its gradients."""
        pred, cache = self.forward(s)
        resid = np.atleast_1d(pred) - np.atleast_1d(y)
        loss = 0.5 * float(np.mean(resid * resid))
        if not np.isfinite(loss):
            raise NumericError("non-finite loss")
        return loss, self.backward(resid / resid.size, cache), np.atleast_1d(pred)

    def predict(self, windows, batch_size=4096):
        """Predictions in physical units for raw (unstandardized) windows."""
        s, single = _as_batch(windows)
        out = np.empty(s.shape[0])
        for i in range(0, s.shape[0], batch_size):
            pred, _ = self.forward(self.scaler.inputs(s[i : i + batch_size]))
            out[i : i + batch_size] = pred
        out = self.scaler.restore(out)
        return out[0] if single else out

    def to_dict(self, extra=None):
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "variant": self.variant,
            "config": self.config.to_dict(),
            "standardization": asdict(self.scaler),
            "tensors": {
                name: {"shape": list(p.shape), "data": [float(format(v, ".17g")) for v in p.reshape(-1)]}
                for name, p in self.params.items()
            },
        }
        if extra:
            payload.update(extra)
        return payload

    @classmethod
    def from_dict(cls, payload):
        if payload.get("format_version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint format_version {payload.get('format_version')!r}")
        config = ModelConfig.from_dict(payload["config"])
        params = {}
        for name, t in payload["tensors"].items():
            params[name] = np.array(t["data"], dtype=np.float64).reshape(t["shape"])
        expected = param_shapes(config)
        if {k: tuple(v.shape) for k, v in params.items()} != expected:
            raise DataError("checkpoint tensors do not match the model config")
        return cls(config, params, Standardizer(**payload["standardization"]))

    def save(self, path, extra=None):
        Path(path).write_text(json.dumps(self.to_dict(extra), indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))
