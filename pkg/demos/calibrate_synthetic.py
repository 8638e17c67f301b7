"""End to end on a small synthetic deployment: generate, split, train, compare.

Run: python demos/calibrate_synthetic.py   (well under a minute)
"""

import tempfile
from pathlib import Path

from sensorcal import data
from sensorcal.model import ModelConfig
from sensorcal.training import TrainConfig, evaluate, train

workdir = Path(tempfile.mkdtemp())

# Four co-located sensor pairs, one reading per minute for about four days.
# Each low-cost sensor over-reads with a gain, a quadratic term, a weekly drift
# and noise that grows with concentration.
csv_path = data.synth_generate(seed=1, sensors=4, length=6000, path=workdir / "sensors.csv")

n = 60
splits, plan, report = data.load_splits(csv_path, "pm10", n)
print("split:", plan.to_dict())
print("cleaning:", report.to_list())
for name, (x, y) in splits.items():
    print(f"  {name:>10}: {len(y)} windows")

tcfg = TrainConfig(seed=1, epochs=5)
results = {}
for label, config in [
    ("linear", ModelConfig(variant="linear", n=n)),
    ("dlinear", ModelConfig(variant="dlinear", n=n)),
    ("tesla", ModelConfig(n=n, d=32, heads=4, embedding_bias=True)),
]:
    model, trace = train(config, tcfg, splits["train"], splits["validation"])
    results[label] = evaluate(model, *splits["test"])
    print(f"{label:>8}: best epoch {trace.best_epoch + 1}, val rmse {min(trace.val_rmse):.3f}")

raw = next(iter(results.values()))
print()
print(f"{'model':>8} {'rmse':>7} {'mae':>7} {'params':>7}")
print(f"{'raw':>8} {raw.raw_rmse:>7.3f} {raw.raw_mae:>7.3f} {'-':>7}")
for label, rep in results.items():
    print(f"{label:>8} {rep.rmse:>7.3f} {rep.mae:>7.3f} {rep.params:>7}")
