"""
GSPO against IBPO at desk scale
===============================

Both methods train on the chain task until the trailing reward reaches 0.9.
IBPO pays for its corrections in compute units, yet it reaches the 0.75
threshold with fewer units because shaping gives a signal on groups where
every answer is wrong.
"""
# %%
import tempfile
from pathlib import Path

import yaml

from ibpo_lab.cli import build_run_config
from ibpo_lab.trainer import read_metrics, train, units_to_threshold

cfg = yaml.safe_load((Path(__file__).resolve().parents[1] / "configs" / "desk.yaml").read_text())
cfg.pop("ablation")

# %%
out = Path(tempfile.mkdtemp())
units = {}
for method in ("GSPO", "IBPO_BASE"):
    rows = read_metrics(train(build_run_config({**cfg, "method": method}), out / method))
    units[method] = units_to_threshold(rows, 0.75)
    print(f"{method:9s} iterations {len(rows):4d}  units to 0.75: {units[method]:,.0f}")
print(f"ratio IBPO / GSPO = {units['IBPO_BASE'] / units['GSPO']:.3f}")

# %%
# Where the shaping signal comes from: incorrect answers repaired by the corrector.
ibpo = read_metrics(out / "IBPO_BASE" / "metrics.csv")
for r in ibpo[::max(1, len(ibpo) // 8)]:
    print(f"iter {int(r['iteration']):4d} reward {float(r['mean_reward']):.3f} "
          f"shaped {float(r['mean_shaped_reward']):.3f} success {float(r['correction_success_rate']):.3f}")
