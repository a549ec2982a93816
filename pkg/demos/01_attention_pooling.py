"""Attention pooling on a toy backbone.

Each stage of the backbone produces a grid of channel vectors. Attention
scores every location against the global descriptor ``u`` and pools the
grid into one vector per stage.
"""

# %%
import numpy as np

from zslmetric.extractor import (ATTENTION_KINDS, BackboneConfig, ExtractorConfig,
                                 FeatureExtractor, export_attention)
from zslmetric.gradcore import Tensor, no_grad

rng = np.random.default_rng(0)
backbone = BackboneConfig(input_dim=12, stage_shapes=[(4, 3, 3), (6, 2, 2)], hidden_dim=8)
x = rng.standard_normal(12)

# %% [markdown]
# The same input under every scoring rule. Weights over the 3x3 grid of
# stage 0 always sum to one; only their spread changes.

# %%
for kind in ATTENTION_KINDS:
    ext = FeatureExtractor(ExtractorConfig(backbone, kind), np.random.default_rng(1))
    with no_grad():
        out = ext.forward(Tensor(x))
    w = out.weights[0].data
    if w.ndim == 2:  # multidim keeps one weight per channel
        w = w.mean(axis=1)
    print(f"{kind:<22} max weight {w.max():.3f}  features {out.features.shape}")

# %% [markdown]
# Heatmaps go to disk as a CSV grid plus an 8-bit PGM.

# %%
ext = FeatureExtractor(ExtractorConfig(backbone, "additive_simple"), np.random.default_rng(1))
with no_grad():
    w = ext.forward(Tensor(x)).weights[0].data
print(export_attention(w, (3, 3), "/tmp/demo_attention"))
