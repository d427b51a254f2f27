"""
Replicate weights and the margin of error
=========================================

Rubin pooling treats the recipient weights as fixed. When the recipient
ships replicate weights, each implicate gets one replicate column and the
spread of the replicate estimates is added to the pooled variance.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from statfuse.analysis import AnalysisRequest, estimate
from statfuse.pipeline import FusionSpec, fuse, train_fusion
from statfuse.synthbench import SynthConfig, fusion_steps, generate_population

cfg = SynthConfig(population=30_000, n_donor=3_000, n_recipient=6_000, n_replicates=20, seed=8)
donor, recipient, _ = generate_population(cfg)
spec = FusionSpec(steps=fusion_steps(cfg)[:2], predictors=cfg.predictors, M=20, seed=2)
implicates = fuse(train_fusion(donor, spec), recipient)

plain = estimate(implicates, recipient, AnalysisRequest("mean", "elec", by=("region", "tenure")))
withrep = estimate(implicates, recipient,
                   AnalysisRequest("mean", "elec", by=("region", "tenure"), use_replicate_weights=True))
ratio = withrep["moe"] / plain["moe"]
print(ratio.describe())

fig, ax = plt.subplots(figsize=(5, 3.5))
ax.scatter(plain["n"], ratio, color="black", s=12)
ax.axhline(1.0, color="grey", lw=0.8)
ax.set_xscale("log")
ax.set_xlabel("subgroup size")
ax.set_ylabel("MOE with / without replicates")
fig.tight_layout()
fig.savefig("replicate_moe_ratio.png", dpi=120)
print("all at least 1:", bool(np.all(ratio >= 1)))
