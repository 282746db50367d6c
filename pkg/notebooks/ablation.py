# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Feature pooling and boundary regression
#
# Compare three variants over a few seeds:
#
# * `full`: average-pooled window features with boundary regression
# * `no-pool`: 16 uniformly sampled frames with boundary regression
# * `no-pool-no-rgn`: 16 uniformly sampled frames without regression
#
# mAP@0.5 uses the oracle classifier on the top 20 proposals per video, so the
# numbers isolate localisation quality.

# %%
import numpy as np

from adaptprop import EpisodeConfig, SyntheticSpec, TrainConfig, ablation_study, generate_synthetic_dataset

SEEDS = (0, 1, 2)

# %%
results = []
for seed in SEEDS:
    videos = generate_synthetic_dataset(SyntheticSpec(n_train=10, n_test=10, seed=seed))
    train = [v for v in videos if v.split == "train"]
    test = [v for v in videos if v.split == "test"]
    cfg = TrainConfig(epochs=20, hidden_dims=(128, 64), seed=seed)
    r = ablation_study(train, test, 2, cfg, EpisodeConfig(), k=20)
    print(seed, {k: round(x, 3) for k, x in r.items()})
    results.append(r)

# %% [markdown]
# ## Medians across seeds

# %%
for name in results[0]:
    print(f"{name:15s} median mAP {np.median([r[name] for r in results]):.3f}")
