"""Analytical profilers: parameter counts, FLOPs per stage, activation memory.

Everything here is a pure function of a :class:`ModelConfig`; nothing is
executed. Conventions:

* one multiply-add is 2 FLOPs; a lone add/multiply/compare is 1 FLOP;
* softmax costs 5 FLOPs per logit;
* LayerNorm costs 8 FLOPs per element;
* counts are for one forward pass over one window.

The attention core is the qkv-projection, attention-scores, softmax and
attention-apply stages.
"""

from dataclasses import asdict, dataclass

import numpy as np

from sensorcal.model import ModelConfig, param_shapes

STAGES = (
    "embedding",
    "binning",
    "qkv_projection",
    "attention_scores",
    "softmax",
    "attention_apply",
    "aggregation",
)
CORE_STAGES = ("qkv_projection", "attention_scores", "softmax", "attention_apply")
PRECISION_BYTES = {"float64": 8, "float32": 4}
SOFTMAX_FLOPS = 5
LAYER_NORM_FLOPS = 8


@dataclass(frozen=True)
class FlopsBreakdown:
    embedding: int = 0
    binning: int = 0
    qkv_projection: int = 0
    attention_scores: int = 0
    softmax: int = 0
    attention_apply: int = 0
    aggregation: int = 0

    @property
    def total(self):
        return sum(getattr(self, s) for s in STAGES)

    @property
    def attention_core(self):
        return sum(getattr(self, s) for s in CORE_STAGES)

    def to_dict(self):
        return {**asdict(self), "attention_core": self.attention_core, "total": self.total}


@dataclass(frozen=True)
class Stage:
    name: str
    flops: int
    live: tuple  # element counts of tensors alive while the stage runs
    cached: tuple = ()  # element counts this stage keeps for the backward pass


@dataclass(frozen=True)
class ResourceEstimate:
    params: int
    param_bytes: int
    forward_peak_bytes: int
    train_peak_bytes: int
    precision: str = "float64"

    def to_dict(self):
        return asdict(self)


def count_params(config):
    """Closed-form trainable-scalar count for any variant/ablation."""
    n, d = config.n, config.d
    if config.variant in ("linear", "nlinear"):
        return n + 1
    if config.variant == "dlinear":
        return 2 * n + 1
    ffn = 8 * d * d + 5 * d
    if config.variant == "transformer":
        return n * d + 2 * d + 4 * d * d + 2 * d + ffn + 2 * d + d + 1
    z = config.layout.z
    total = d + n + 3 * d * d + 2 * d
    if config.embedding == "local_global":
        total += n * d
    if config.embedding_bias:
        total += d
    total += d + z if config.aggregator == "linear" else ffn + d + 1
    return total


def count_params_enumerated(config):
    """Trainable-scalar count obtained by walking the parameter shapes."""
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


def _attention_stages(t, d, h):
    dh = d // h
    return [
        Stage("qkv_projection", 2 * 3 * t * d * d, (t * d, 3 * t * d), (3 * t * d,)),
        Stage("attention_scores", 2 * h * t * t * dh, (3 * t * d, h * t * t)),
        Stage("softmax", SOFTMAX_FLOPS * h * t * t, (t * d, 2 * h * t * t), (h * t * t,)),
    ]


def shape_ledger(config):
    """Per-stage FLOPs and live/cached tensor sizes for one window."""
    n, d, h = config.n, config.d, config.heads
    v = config.variant
    if v == "linear":
        return [Stage("aggregation", 2 * n + 1, (n, 1), (n,))]
    if v == "nlinear":
        return [Stage("embedding", n, (n, n), (n,)), Stage("aggregation", 2 * n + 2, (n, 1))]
    if v == "dlinear":
        k = config.dlinear_kernel
        return [
            Stage("embedding", 2 * n * k + n, (n, 2 * n), (n, 2 * n)),
            Stage("aggregation", 2 * 2 * n + 2, (2 * n, 1)),
        ]
    if v == "transformer":
        stages = [Stage("embedding", 2 * n * d + 2 * n * d, (n, n * d), (n, n * d))]
        stages += _attention_stages(n, d, h)
        stages.append(
            Stage("attention_apply", 2 * n * n * d + 2 * n * d * d, (n * d, h * n * n, 2 * n * d), (2 * n * d,))
        )
        post = n * d + LAYER_NORM_FLOPS * n * d  # residual + LN
        post += 2 * 2 * n * d * 4 * d + n * 4 * d + n * d + n * 4 * d  # FFN matmuls, biases, ReLU
        post += n * d + LAYER_NORM_FLOPS * n * d + 2 * d + 1  # residual, LN, last-token head
        stages.append(
            Stage("aggregation", post, (n * d, n * d, 4 * n * d, n * d, 1), (2 * n * d, 8 * n * d, 2 * n * d))
        )
        return stages

    z = config.layout.z
    if config.embedding == "local_global":
        emb = Stage("embedding", 2 * n * d + 2 * n * d + n * d, (n, n * d), (n, n * d))
    else:
        emb = Stage("embedding", 2 * n * d, (n, n * d), (n, n * d))
    if config.embedding_bias:
        emb = Stage(emb.name, emb.flops + n * d, emb.live, emb.cached)
    stages = [emb, Stage("binning", 2 * n * d, (n * d, z * d), (z * d,))]
    stages += _attention_stages(z, d, h)
    stages.append(Stage("attention_apply", 2 * z * z * d, (z * d, h * z * z, z * d), (z * d,)))
    if config.aggregator == "linear":
        agg = LAYER_NORM_FLOPS * z * d + 2 * z * d + 2 * z
        stages.append(Stage("aggregation", agg, (z * d, z * d, z, 1), (z * d, z)))
    else:
        agg = LAYER_NORM_FLOPS * z * d + 2 * 2 * z * d * 4 * d + z * 4 * d + z * d + z * 4 * d + 2 * d + 1
        stages.append(Stage("aggregation", agg, (z * d, 4 * z * d, z * d, 1), (z * d, 8 * z * d, d)))
    return stages


def count_flops(config):
    per_stage = dict.fromkeys(STAGES, 0)
    for st in shape_ledger(config):
        per_stage[st.name] += st.flops
    return FlopsBreakdown(**per_stage)


def estimate_memory(config, precision="float64"):
    """Peak activation bytes for inference and for one training step on one window.

    Training adds every cached activation, the largest live stage of the
    backward sweep, and gradient plus two Adam moment buffers per parameter.
    """
    width = PRECISION_BYTES[precision]
    ledger = shape_ledger(config)
    forward_peak = max(sum(st.live) for st in ledger)
    cached = sum(sum(st.cached) for st in ledger)
    params = count_params(config)
    train_peak = cached + forward_peak + 3 * params
    return ResourceEstimate(
        params=params,
        param_bytes=params * width,
        forward_peak_bytes=forward_peak * width,
        train_peak_bytes=train_peak * width,
        precision=precision,
    )


def profile(config, precision="float64"):
    return {
        "config": config.to_dict(),
        "params": count_params(config),
        "flops": count_flops(config).to_dict(),
        "memory": estimate_memory(config, precision).to_dict(),
    }


def profile_rows(variants, ns, d=64, heads=4, **overrides):
    """One flat dict per (variant, n), ready for a CSV writer."""
    rows = []
    for v in variants:
        for n in ns:
            cfg = ModelConfig(variant=v, n=n, d=d, heads=heads, **overrides)
            p = profile(cfg)
            rows.append(
                {
                    "variant": v,
                    "n": n,
                    "d": d,
                    "params": p["params"],
                    **{f"flops_{k}": val for k, val in p["flops"].items()},
                    "forward_peak_bytes": p["memory"]["forward_peak_bytes"],
                    "train_peak_bytes": p["memory"]["train_peak_bytes"],
                }
            )
    return rows
