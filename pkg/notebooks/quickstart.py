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
# # Quickstart
#
# Generate a small synthetic benchmark, train one Q-network and regressor per
# class, sweep the test videos and measure proposal recall against a random
# walk. Epoch counts are kept small so the script runs in a couple of minutes.

# %%
import numpy as np

from adaptprop import (
    EpisodeConfig, QPolicy, RandomPolicy, SyntheticSpec, TrainConfig, detect_video,
    generate_synthetic_dataset, recall_at, test_search, train_class_model,
)
from adaptprop.evaluation import gts_by_video, group_by_video, score_proposals

# %% [markdown]
# ## Data
#
# Each video is a sequence of unit-norm 64-d frame embeddings: background
# frames sit near one random direction, action frames near a per-class one.

# %%
spec = SyntheticSpec(n_train=8, n_test=6, seed=1)
videos = generate_synthetic_dataset(spec)
train = [v for v in videos if v.split == "train"]
test = [v for v in videos if v.split == "test"]
print(len(train), "train videos,", len(test), "test videos")
print("first test video:", len(test[0].frame_features), "frames,", test[0].ground_truths)

# %% [markdown]
# ## Training
#
# One model per class. The epoch log tracks mean episode reward, which should
# climb as the exploration rate decays.

# %%
cfg = TrainConfig(epochs=10, hidden_dims=(128, 64), seed=1)
env = EpisodeConfig()
models = [train_class_model(train, c, cfg, env) for c in range(len(spec.class_names))]
for e in models[0].log:
    print(f"epoch {e.epoch:2d}  eps {e.epsilon:.2f}  reward {e.avg_reward:7.2f}  "
          f"trigger precision {e.trigger_precision:.2f}")

# %% [markdown]
# ## Detection and recall
#
# Each class model sweeps the video; visited windows become proposals scored
# by their best Q-value, with triggers ranked first.

# %%
dqn = []
for v in test:
    found, _ = detect_video(v, [m.q_net for m in models], env, [m.regressor for m in models])
    dqn.extend(found)

rng = np.random.default_rng(0)
rand = []
for v in test:
    for c in range(len(spec.class_names)):
        rand.extend(score_proposals(v.id, test_search(v.restricted_to(c), RandomPolicy(rng), env), class_id=c))

gts = gts_by_video(test)
for k in (5, 10, 20):
    print(f"recall@0.5 with {k:2d} proposals: dqn {recall_at(group_by_video(dqn), gts, 0.5, k):.3f}  "
          f"random {recall_at(group_by_video(rand), gts, 0.5, k):.3f}")
