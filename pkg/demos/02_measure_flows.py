# %% [markdown]
# # Functionals of a flow of laws
#
# Here the argument is the law `mu_t` of a particle, and `F(t, mu)` is built
# from moments: `F = f(<mu, g_1>, ..., <mu, g_n>)`. The verifier offers two
# checks.
#
# * **pathwise-empirical** applies the formula to the empirical measure of N
#   particles. That is a finite-dimensional identity, so it can be compared
#   with an independent assembly on the moments themselves. The two must agree
#   to rounding once the finite-N covariation corrections are included.
# * **mc-law** estimates both sides over independent worlds. An independent
#   particle cloud realizes the tilde expectation.

# %%
import numpy as np

from measureflow.paths import brownian_motion, drifted_brownian, jump_diffusion
from measureflow.scenarios import Scenario, Sizes, make_field
from measureflow.verifier import convergence_study, verify_full_measure

# %% [markdown]
# ## Exact regrouping
#
# Jump-diffusion particles and `F = <mu, x>^2`. The `oracle gap` extra is the
# difference between the two independent assemblies.

# %%
scn = Scenario("jd", jump_diffusion(rate=2.0), make_field("mean-squared"))
r = verify_full_measure(scn, "pathwise-empirical", Sizes(200, 50, 5), seed=3)
print("oracle gaps:", [f"{b.extras['oracle gap']:.1e}" for b in r.breakdowns])

# %% [markdown]
# ## What the corrections are worth
#
# With the corrections switched off, the empirical identity is off by the
# covariation of the empirical mean, which is about `t / N`.

# %%
bm = Scenario("bm", brownian_motion(), make_field("mean-squared"))
study = convergence_study(
    lambda N, s: verify_full_measure(bm, "pathwise-empirical", Sizes(100, int(N), 20), seed=s, corrections=False),
    (10, 100, 1000), "N", "rms", seed=4)
print("rms:", np.round(study.values, 5), "slope in N:", round(study.slope, 3))

# %% [markdown]
# ## Closed forms in law
#
# A deterministic drift `X_t = b t` makes `F = <mu, x>^2` equal `(b t)^2`.
# The left-point sum misses exactly `b^2 t dt`.

# %%
b = 0.5
r = verify_full_measure(Scenario("bt", drifted_brownian(b, 0.0), make_field("mean-squared")), "mc-law",
                        Sizes.from_dt(1e-3, N=50, M=5), seed=5)
print("mean residual:", r.mean_residual, "expected:", b * b * 1e-3)

# %%
r = verify_full_measure(Scenario("m2", brownian_motion(), make_field("second-moment")), "mc-law",
                        Sizes(20, 1000, 200), seed=6)
print(f"second moment: residual {r.mean_residual:.4f} +- {r.standard_error:.4f}")
print({k: round(v[0], 4) for k, v in r.term_stats().items()})
