# %% [markdown]
# # Does distillation help the shallow classifiers?
#
# Nodes that exit at hop 1 are classified by f^(1). We train it three
# ways on the same data and teacher: alone, against the frozen order-k
# teacher, and then jointly with the attention-weighted ensemble.

# %%
import numpy as np

from nai import PRESETS, DistillConfig, TrainConfig, generate_sbm
from nai.pipeline import build_bank, classifier_accuracy, fit_teacher, prepare, train_stack, validation_set

k = 5
scores = {"none": [], "offline": [], "full": []}
for seed in range(3):
    ctx = prepare(generate_sbm(PRESETS["sbm-small"], seed=seed), 0.5)
    cfg = TrainConfig(seed=seed)
    teacher = fit_teacher(ctx, train_stack(ctx, k), cfg, validation_set(ctx, k))
    for mode in scores:
        bank = build_bank(ctx, k, "sgc", cfg, DistillConfig(seed=seed), mode=mode, teacher=teacher)
        scores[mode].append(classifier_accuracy(ctx, bank, 1, ctx.split.test))
    print(f"seed {seed}: " + "  ".join(f"{m} {s[-1]:.3f}" for m, s in scores.items()))

# %%
for mode, s in scores.items():
    print(f"{mode:>8}: mean f^(1) test accuracy {np.mean(s):.3f}")
