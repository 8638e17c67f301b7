"""Seeded mini-batch training with Adam and best-validation model selection."""

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from sensorcal.errors import DataError, DivergenceError, NumericError
from sensorcal.model import CalibrationModel, ModelConfig, Standardizer
from sensorcal.numerics import AdamState, adam_step

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("epoch", "train_mse", "val_rmse", "val_mae", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainTrace:
    train_mse: list = field(default_factory=list)
    val_rmse: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    steps: int = 0

    @property
    def best_epoch(self):
        """0-based epoch with the lowest validation RMSE (earliest on ties)."""
        return int(np.argmin(self.val_rmse))

    def rows(self):
        return [
            (i + 1, self.train_mse[i], self.val_rmse[i], self.val_mae[i], self.seconds[i])
            for i in range(len(self.train_mse))
        ]

    def to_csv(self, include_seconds=True):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for epoch, mse, rmse, mae, sec in self.rows():
            w.writerow([epoch, repr(mse), repr(rmse), repr(mae), f"{sec:.3f}" if include_seconds else ""])
        return buf.getvalue()


@dataclass
class EvalReport:
    rmse: float
    mae: float
    raw_rmse: float
    raw_mae: float
    count: int
    params: int = 0
    flops: dict = field(default_factory=dict)
    memory: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def rmse_mae(pred, target):
    resid = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    if resid.size == 0:
        raise DataError("cannot score an empty set")
    return float(np.sqrt(np.mean(resid * resid))), float(np.mean(np.abs(resid)))


def evaluate(model, windows, targets, with_profile=True):
    """RMSE/MAE of ``model`` in physical units, alongside the uncalibrated sensor.

    The raw score treats the newest reading of each window as the prediction.
    """
    windows = np.asarray(windows, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if windows.shape[0] == 0:
        raise DataError("empty_test_set: no windows to evaluate")
    pred = model.predict(windows)
    if not np.all(np.isfinite(pred)):
        raise NumericError("non-finite predictions")
    rmse, mae = rmse_mae(pred, targets)
    raw_rmse, raw_mae = rmse_mae(windows[:, -1], targets)
    report = EvalReport(rmse, mae, raw_rmse, raw_mae, int(windows.shape[0]), params=model.n_params())
    if with_profile:
        from sensorcal import metrics

        report.flops = metrics.count_flops(model.config).to_dict()
        report.memory = metrics.estimate_memory(model.config).to_dict()
    return report


def train(model_config, train_config, train_xy, val_xy, init_seed=None):
    """Fit a model on ``train_xy = (windows, targets)`` in physical units.

    Inputs and targets are standardized with training-split statistics. The
    returned model holds the parameters from the epoch with the lowest
    validation RMSE.
    """
    x_train, y_train = (np.asarray(a, dtype=np.float64) for a in train_xy)
    x_val, y_val = (np.asarray(a, dtype=np.float64) for a in val_xy)
    if x_train.shape[0] == 0:
        raise DataError("empty training set")
    if x_val.shape[0] == 0:
        raise DataError("empty validation set")
    if x_train.shape[1] != model_config.n:
        raise DataError(f"windows have length {x_train.shape[1]}, model expects {model_config.n}")

    scaler = Standardizer.fit(x_train, y_train)
    seed = train_config.seed if init_seed is None else init_seed
    model = CalibrationModel.create(model_config, seed=seed, scaler=scaler)
    hyper = dict(lr=train_config.lr, beta1=train_config.beta1, beta2=train_config.beta2, eps=train_config.eps)
    states = {k: AdamState.fresh(p, **hyper) for k, p in model.params.items()}

    xs = scaler.inputs(x_train)
    ys = scaler.targets(y_train)
    rng = np.random.default_rng(train_config.seed)
    trace = TrainTrace()
    best_params, best_rmse = None, np.inf
    m = xs.shape[0]
    bs = train_config.batch_size

    for epoch in range(train_config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(m)
        sq_sum = 0.0
        for b, start in enumerate(range(0, m, bs)):
            idx = order[start : start + bs]
            try:
                # overflow is caught by the finite checks below, not by warnings
                with np.errstate(over="ignore", invalid="ignore"):
                    _, grads, pred = model.loss_and_grads(xs[idx], ys[idx])
                for k in model.params:
                    model.params[k], states[k] = adam_step(model.params[k], grads[k], states[k])
            except (NumericError, FloatingPointError) as exc:
                raise DivergenceError(
                    f"training diverged in epoch {epoch + 1} at batch {b}: {exc}", epoch=epoch + 1, batch_index=b
                ) from exc
            resid = pred - ys[idx]
            sq_sum += float(resid @ resid)
            trace.steps += 1
        val = evaluate(model, x_val, y_val, with_profile=False)
        trace.train_mse.append(sq_sum / m)
        trace.val_rmse.append(val.rmse)
        trace.val_mae.append(val.mae)
        trace.seconds.append(time.perf_counter() - t0)
        log.info("epoch %d train_mse=%.5f val_rmse=%.4f", epoch + 1, trace.train_mse[-1], val.rmse)
        if val.rmse < best_rmse:
            best_rmse = val.rmse
            best_params = {k: v.copy() for k, v in model.params.items()}

    model.params = best_params
    return model, trace


def train_model(config: ModelConfig, train_config: TrainConfig, splits):
    """Convenience wrapper taking ``splits = {"train": (X, y), "validation": (X, y), ...}``."""
    return train(config, train_config, splits["train"], splits["validation"])
