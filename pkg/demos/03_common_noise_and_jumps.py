# %% [markdown]
# # Common noise, product fields and compensators
#
# With a common Brownian motion `B` and common jumps, the relevant measure is
# the conditional law given the common noise. The verifier freezes the common
# noise per outer world. It then realizes conditional expectations by
# averaging over particles that share that noise but have fresh idiosyncratic
# noise.

# %%
from measureflow.paths import brownian_motion, common_noise, compound_poisson, jump_diffusion
from measureflow.scenarios import Scenario, Sizes, make_field
from measureflow.verifier import verify_conditional, verify_full_measure, verify_poisson, verify_time_space_measure

# %% [markdown]
# ## Everything common
#
# If all particles follow `B`, the conditional law is a point mass at `B_t`.
# `<mu, x^2>` is then `B_t^2`, and the expansion is the classical one.

# %%
r = verify_conditional(Scenario("B2", common_noise(sigma_idio=0.0), make_field("second-moment")),
                       Sizes.from_dt(1e-3, N=5, M=20), seed=0)
print("max |residual|:", round(r.max_abs_residual, 4), "vs 5 sqrt(dt):", round(5 * 1e-3 ** 0.5, 4))

# %% [markdown]
# ## Nothing common
#
# Without common noise the conditional residuals should look like the
# unconditional ones.

# %%
field = make_field("mean-squared")
a = verify_full_measure(Scenario("full", brownian_motion(), field), "mc-law", Sizes(50, 50, 200), seed=1)
b = verify_conditional(Scenario("idio", common_noise(sigma_common=0.0), field), Sizes(50, 50, 200), seed=2)
print(f"full: {a.mean_residual:.4f} +- {a.standard_error:.4f}; conditional: {b.mean_residual:.4f} +- {b.standard_error:.4f}")

# %% [markdown]
# ## Fields of the state and the measure
#
# `F(t, x, mu) = x <mu, x>`, computed with both chain-rule orderings. Both
# totals must match the left side.

# %%
scn = Scenario("x-times-mean", jump_diffusion(rate=2.0), make_field("x-times-mean"))
for form in ("coro1", "coro1-alt"):
    r = verify_time_space_measure(scn, form, Sizes(50, 50, 200), seed=3)
    print(f"{form:>9s}: {r.mean_residual: .4f} +- {r.standard_error:.4f}")

# %% [markdown]
# ## Compensated sums
#
# For compound Poisson particles the jump sums are replaced by integrals
# against the intensity. The realized sums are kept as extras, so their
# agreement with the compensators can be checked in mean.

# %%
r = verify_poisson(Scenario("cp", compound_poisson(rate=2.0), make_field("poisson-mean", rate=2.0)),
                   sizes=Sizes(20, 50, 300), seed=4)
for name, (m, se) in r.term_stats().items():
    print(f"{name:>50s} {m: .4f} +- {se:.4f}")
