# %% [markdown]
# # Periodic system: quantile loss vs MSE
#
# Train two surrogates of the 2-d periodic map on the same data, one with the
# quantile loss (scaling factors and q learned jointly) and one with plain MSE
# (scaling factors set afterwards from the residual maxima).  Compare the
# upper bounds UB_i = R_i * sum(1/alpha) that the inflation box is built from,
# then build a 95%-confident flowpipe from the quantile model.

# %%
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from statreach import conformal, dynamics, reach, surrogate

OUT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "out")
os.makedirs(OUT, exist_ok=True)

# %%
model = dynamics.get_model("periodic2d")
init = dynamics.default_initial_set("periodic2d")
K = 20
train = dynamics.sample_dataset(model, init, K, 10_000, seed=1)
calib = dynamics.sample_dataset(model, init, K, 2000, seed=2)
fresh = dynamics.sample_dataset(model, init, K, 10_000, seed=3)
print(model.label, "tails", train.tails.shape)

# %% [markdown]
# Both runs share data, architecture and seed.  The quantile run spends its
# first 100 epochs on MSE, then trains alpha and q under c*L1 + L2.

# %%
sizes = [2, 20, 40, 40]
fits = {mode: surrogate.train(train, surrogate.TrainConfig(loss_mode=mode, seed=7), sizes) for mode in ("quantile", "mse")}

ub = {}
for mode, res in fits.items():
    comps = np.abs(fresh.tails - surrogate.forward(res.net, fresh.initial_states))
    ub[mode] = surrogate.upper_bounds(comps, res.alpha) / fresh.tails.shape[1]
    print(f"{mode:9s} UB_0.95/(nK) = {np.quantile(ub[mode], 0.95):.4f}")

# %%
fig, ax = plt.subplots(figsize=(6, 3.5))
bins = np.linspace(0, max(np.quantile(u, 0.99) for u in ub.values()), 80)
for mode, u in ub.items():
    ax.hist(u, bins=bins, alpha=0.5, label=f"{mode} (0.95-q {np.quantile(u, 0.95):.3f})")
ax.set_xlabel("UB_i / nK")
ax.legend()
fig.tight_layout()
fig.savefig(os.path.join(OUT, "periodic_ub_hist.png"), dpi=120)

# %% [markdown]
# Loss curves of the quantile run.  The jump at epoch 100 is the switch from
# MSE to c*L1 + L2; afterwards alpha and q shrink together (the loss is linear
# in L1 under a common rescaling), which is why L1 keeps falling.

# %%
hist = fits["quantile"].loss_history
fig, ax = plt.subplots(figsize=(6, 3.5))
ax.semilogy(hist[:, 0], label="L1 (or MSE)")
ax.semilogy(np.maximum(hist[:, 1], 1e-12), label="L2")
ax.axvline(100, color="k", lw=0.5)
ax.set_xlabel("epoch")
ax.legend()
fig.tight_layout()
fig.savefig(os.path.join(OUT, "periodic_loss.png"), dpi=120)

# %% [markdown]
# Calibrate on held-out trajectories, propagate 100 partitions of the initial
# box through the network and inflate by r*/alpha_j.

# %%
res = fits["quantile"]
scal = conformal.scalar_residuals(conformal.residual_matrix(res.net, calib.trajectories), res.alpha)
q = conformal.robust_quantile(scal, 0.05)
parts = reach.partition(reach.Box(init.lower, init.upper), [10, 10])
sfp = reach.surrogate_flowpipe(res.net, parts)
fp = reach.inflate(sfp, q.r_star, res.alpha)

r_fresh = conformal.scalar_residuals(conformal.residual_matrix(res.net, fresh.trajectories), res.alpha)
print(f"r* = {q.r_star:.4f}")
print(f"delta~ = {conformal.coverage_delta_tilde(r_fresh, q.r_star):.4f}")
print(f"Delta~ = {reach.contains(fp, fresh.trajectories).mean():.4f}")

# %%
fig, axes = plt.subplots(1, 2, figsize=(9, 3.5), sharex=True)
for d, ax in enumerate(axes):
    steps, lo, hi = reach.project(fp, d)
    _, slo, shi = reach.project(sfp, d)
    for tr in fresh.trajectories[:200].reshape(200, K + 1, 2):
        ax.plot(steps, tr[:, d], color="0.7", lw=0.3)
    ax.fill_between(steps, lo, hi, alpha=0.25, label="inflated")
    ax.fill_between(steps, slo, shi, alpha=0.4, label="surrogate")
    ax.set_title(f"x{d + 1}")
    ax.set_xlabel("step")
axes[0].legend()
fig.tight_layout()
fig.savefig(os.path.join(OUT, "periodic_flowpipe.png"), dpi=120)
