"""Validation-loss curves for 729/243/81/9 image tokens at desk scale.

Writes sweep.csv and sweep.json next to this script (or to the directory given
as the first argument). Takes a few minutes on one core.
"""

import sys
from pathlib import Path

from edgevlm import training
from edgevlm.config import ModelConfig

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parent
out.mkdir(parents=True, exist_ok=True)
res = training.ratio_sweep(ModelConfig(), training.SweepConfig())
(out / "sweep.csv").write_text(res.to_csv())
(out / "sweep.json").write_text(res.to_json() + "\n")
print(res.to_csv(), end="")
for tokens, curve in sorted(res.curves.items(), reverse=True):
    print(f"{tokens:4d} tokens: val loss {curve[0][1]:.3f} -> {curve[-1][1]:.3f}")
