"""How logarithmic binning shrinks a long window before attention.

Run: python demos/bin_layouts.py
"""

from sensorcal import binning
from sensorcal.metrics import count_flops, count_params
from sensorcal.model import ModelConfig

# A 12-reading window collapses to 4 bins. The newest reading keeps a bin
# to itself while the oldest five share one.
layout = binning.bin_layout(12)
print("n=12 boundaries:", layout.alpha)
for j, first, last, width in layout.rows():
    print(f"  bin {j}: readings {first}..{last} (width {width})")

# Uniform binning with the same bin count, for comparison
print("uniform, z=4:", binning.uniform_layout(12, 4).widths)

# Bin counts grow like log2(n), so a day of one-minute readings needs 11 bins
for n in (60, 360, 1440):
    print(f"n={n:>5}: z={binning.bin_layout(n).z:>2}, widths={binning.bin_layout(n).widths}")

# Attention cost follows the bin count, not the window length
print()
print(f"{'n':>6} {'tesla scores':>13} {'vanilla scores':>15} {'tesla params':>13}")
for n in (360, 720, 1440):
    tesla = count_flops(ModelConfig(n=n)).attention_scores
    vanilla = count_flops(ModelConfig(variant="transformer", n=n)).attention_scores
    print(f"{n:>6} {tesla:>13,} {vanilla:>15,} {count_params(ModelConfig(n=n)):>13,}")
