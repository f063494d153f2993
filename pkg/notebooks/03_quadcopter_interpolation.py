# %% [markdown]
# # Quadcopter: training on every other step
#
# The 12-d hover loop is trained on steps 2, 4, ..., K only; a fixed
# interpolation layer fills in the odd steps (the first one from s0).  The
# scaling factors are refined with the closed-form LP on a fresh dataset
# before calibration.

# %%
import numpy as np

from statreach import conformal, dynamics, reach, refine, surrogate

model = dynamics.get_model("quadcopter12d")
init = dynamics.default_initial_set("quadcopter12d")
K, n = 20, model.n
train = dynamics.sample_dataset(model, init, K, 4000, seed=1)
lp = dynamics.sample_dataset(model, init, K, 1000, seed=3)
calib = dynamics.sample_dataset(model, init, K, 2000, seed=2)

# %%
half = train.subsample_steps(2)
res = surrogate.train(half, surrogate.TrainConfig(epochs=80, warmup_mse_epochs=50, seed=0), [n, 60, 120, half.tails.shape[1]])
net = surrogate.attach_interpolation(res.net, 2)
alpha = surrogate.interpolate_alpha(res.alpha, 2, n)
print("trained outputs", res.net.n_out, "-> full outputs", net.n_out)

# %% [markdown]
# How much does interpolation cost?  Compare residuals on trained and
# interpolated steps.

# %%
comps = np.abs(calib.tails - surrogate.forward(net, calib.initial_states)).reshape(-1, K, n)
# step k sits at index k - 1: trained steps are 2, 4, ..., interpolated ones 1, 3, ...
print(f"mean residual, trained steps {comps[:, 1::2].mean():.5f}, interpolated steps {comps[:, 0::2].mean():.5f}")

# %% [markdown]
# Refinement: omega'_j = max_i R_i^j / R_i on the LP set.  Residuals never
# grow, so the quantile does not grow, while sum(omega) shrinks.

# %%
lp_half = lp.subsample_steps(2)
alpha_r = refine.refine_from_data(res.net, res.alpha, lp_half.initial_states, lp_half.tails, 2)
for name, a in (("trained", alpha), ("refined", alpha_r)):
    scal = conformal.scalar_residuals(conformal.residual_matrix(net, calib.trajectories), a)
    r = conformal.conformal_quantile(scal, 0.05)
    print(f"{name:8s} r*={r:.4g}  inflation surface r*·sum(1/alpha)={r * np.sum(1 / a):.4g}")

# %%
scal = conformal.scalar_residuals(conformal.residual_matrix(net, calib.trajectories), alpha_r)
r = conformal.conformal_quantile(scal, 0.05)
fp = reach.inflate(reach.surrogate_flowpipe(net, [reach.Box(init.lower, init.upper)]), r, alpha_r)
fresh = dynamics.sample_dataset(model, init, K, 5000, seed=4)
print("Delta~ =", reach.contains(fp, fresh.trajectories).mean())
steps, lo, hi = reach.project(fp, 2)
for k in (0, 10, 20):
    print(f"altitude bounds at step {k}: [{lo[k]:.3f}, {hi[k]:.3f}]")
