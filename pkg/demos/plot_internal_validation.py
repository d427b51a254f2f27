"""
Internal validation curves
==========================

Fusing the donor back onto itself shows how well subset estimates are
reproduced as subsets get smaller. Value-added compares the fused estimate
with simply reporting the full-sample mean for every subset.
"""

import numpy as np

from statfuse.pipeline import FusionSpec, train_fusion
from statfuse.synthbench import SynthConfig, generate_population
from statfuse.validation import emit_report, internal_validate, validation_curves

cfg = SynthConfig(population=20_000, n_donor=4_000, n_recipient=10, n_replicates=2, seed=5)
donor, _, _ = generate_population(cfg)
bundle = train_fusion(donor, FusionSpec(steps=["elec", "heat"], predictors=cfg.predictors, M=20, seed=3))

# continuous subset variables are cut at quintiles
cells = internal_validate(bundle, donor, ["region", "tenure", "x1", "x2"], M=20, seed=4)
print(cells.groupby("subset_vars")["n"].describe()[["count", "min", "max"]])

curves = validation_curves(cells, variables=["elec"])
for name, c in curves.items():
    print(name, "median", np.round(np.median(c.value), 3))

files = emit_report(cells, curves, "validation_report")
print([f.name for f in files])
