# %% [markdown]
# # Adaptive inference on a planted-partition graph
#
# Train a classifier bank inductively, then let each unseen node stop
# propagating once its features are smooth enough. The sweep shows how
# accuracy trades against feature-processing cost.

# %%
import numpy as np

from nai import PRESETS, NapConfig, TrainConfig, generate_sbm, make_grid, pareto_front
from nai.pipeline import build_bank, default_ts_grid, prepare, run_nai, run_vanilla, sweep_validation

bundle = generate_sbm(PRESETS["sbm-small"], seed=1)
ctx = prepare(bundle, r=0.5)
print(f"train graph n={ctx.train_graph.n}, full graph n={ctx.graph.n} after arrival")

# %%
k = 5
bank = build_bank(ctx, k, "sgc", TrainConfig(seed=1), mode="full")
for l in range(1, k + 1):
    print(f"f^({l}) validation accuracy {bank.val_acc[l]:.3f}")

# %% [markdown]
# Thresholds come from the observed distance quantiles on validation
# nodes. Every setting runs the full exit procedure.

# %%
val, test = ctx.split.validation, ctx.split.test
grid = make_grid(default_ts_grid(ctx, val, k), [1, 2], range(1, k + 1))
cands = sweep_validation(ctx, bank, grid)
vanilla_val = run_vanilla(ctx, bank, val)
print(f"{len(cands)} settings; vanilla validation acc {vanilla_val.accuracy(ctx.labels):.3f}, "
      f"FP MACs {vanilla_val.macs.fp}")
print("\nPareto front (validation):")
for c in pareto_front(cands):
    print(f"  ts={c.ts:.4f} tmin={c.tmin} tmax={c.tmax}  acc {c.accuracy:.3f}  "
          f"FP MACs {c.fp_macs:>9}  exits {list(c.histogram)}")

# %% [markdown]
# Pick the cheapest front point that keeps validation accuracy within two
# point of the best, and check it on test nodes.

# %%
front = pareto_front(cands)
best = max(c.accuracy for c in front)
pick = next(c for c in front if c.accuracy >= best - 0.02)
van = run_vanilla(ctx, bank, test)
nai = run_nai(ctx, bank, NapConfig(pick.ts, pick.tmin, pick.tmax), test)
print(f"test: vanilla {van.accuracy(ctx.labels):.3f} vs adaptive {nai.accuracy(ctx.labels):.3f}")
print(f"FP MACs {van.macs.fp} -> {nai.macs.fp} ({van.macs.fp / nai.macs.fp:.1f}x fewer)")
print("exit histogram", nai.histogram(k))
