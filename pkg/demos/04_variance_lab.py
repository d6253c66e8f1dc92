"""
The variance lab
================

An exchangeable group model for (Y, phi) lets us check, by Monte Carlo,
that shaping lowers the variance of the centered advantage for
0 < lambda < lambda_max = 2 C / V_phi and raises it beyond.
"""
# %%
import numpy as np

from ibpo_lab import analysis

model = analysis.ExchangeableModel(p=0.3, m=0.6, shape="beta", coupling="shared_reference")
rng = np.random.default_rng(0)

# %%
for p, m in [(0.2, 0.5), (0.5, 0.4), (0.8, 0.9)]:
    est = analysis.estimate_moments(analysis.ExchangeableModel(p, m, "beta"), 4, 100_000, rng)
    closed = analysis.lemma_cov_closed_form(p, m)
    print(f"p={p} m={m}: C_in {est.C_in:+.4f} (SE {est.se_C_in:.4f}) vs closed form {closed:+.4f}")

# %%
est = analysis.estimate_moments(model, 4, 100_000, rng)
lam_hat = analysis.lambda_max_from_moments(est)
print(f"coupled model: C_out {est.C_out:+.4f}, C {est.C:.4f}, V_phi {est.V_phi:.4f}, lambda_max {lam_hat:.3f}")

# %%
rows = analysis.variance_sweep_report(model, 4, np.linspace(0, 1.25 * lam_hat, 11), 100_000, rng)
print(analysis.format_report(rows))

# %%
for G in (2, 4, 8):
    fc = analysis.covariance_factor_check(model, G, 100_000, rng)
    print(f"G={G}: covariance factor {fc.ratio:.4f} vs 1 - 1/G = {fc.expected:.4f}")
