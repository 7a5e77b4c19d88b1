"""Walk through the exact discrete theory on the canonical environments.

Everything here is computed in closed form on small probability tables, so
the printed numbers are exact up to float64 arithmetic. Run with:

    python demos/theory_walkthrough.py
"""

import numpy as np

from drm import (HypothesisClass, balance, bayes_domain_accuracy,
                 check_assumption1, correlation_shift_measure,
                 h_divergence_brute_force, h_divergence_complete, joint,
                 lambda_term_population, risk, risk_balanced, theorem1_check,
                 vc_bound_term, verify_theory, x_marginal)
from drm.data import canonical_env_specs, latent_scm

specs = canonical_env_specs(n=10, seed=0)   # n irrelevant for exact analysis
scm = latent_scm(specs)
names = scm.env_names
print(f"environments: {names}")

# --- observational vs balanced tables on the +90% environment -------------
print("\nP(Y=1, Z=1) observational :", joint(scm, 0).marginal("Y", "Z").values()[1, 1])
print("P(Y=1, Z=1) balanced      :", balance(scm, 0).marginal("Y", "Z").values()[1, 1])
print("balanced X marginal       :", x_marginal(scm, 0, balanced=True))

# --- correlation shift between environment pairs --------------------------
for a, b in ((0, 1), (0, 2), (1, 2)):
    value = correlation_shift_measure(scm, a, b)
    print(f"correlation shift {names[a]} vs {names[b]}: {value:.3f}")

# --- the marginal-dominance assumption -------------------------------------
print("\nassumption, source +90% -> target -90%:", check_assumption1(scm, 0, 2))
print("assumption, source +90% -> target +90%:", check_assumption1(scm, 0, 0))
print("(an identical pair fails: balancing must move some X mass upward)")

# --- divergence contraction (the reason balancing helps) -------------------
raw = h_divergence_complete(x_marginal(scm, 0), x_marginal(scm, 2))
balanced = h_divergence_complete(x_marginal(scm, 0, balanced=True),
                                 x_marginal(scm, 2))
print(f"\ncomplete-class divergence to -90%: raw {raw:.3f} -> balanced {balanced:.3f}")
print("closed form equals the 2^|X|-subset supremum:",
      np.isclose(raw, h_divergence_brute_force(x_marginal(scm, 0),
                                               x_marginal(scm, 2))))

# --- risks of the two natural predictors -----------------------------------
color = np.array([0, 1, 0, 1])   # X index is 2*shape + color
shape = np.array([0, 0, 1, 1])
for name, h in (("color rule", color), ("shape rule", shape)):
    print(f"{name}: risk on +90% = {risk(h, scm, 0):.3f}, "
          f"on -90% = {risk(h, scm, 2):.3f}, "
          f"balanced +90% = {risk_balanced(h, scm, 0):.3f}")

# --- the generalization bound for the shape rule ---------------------------
hclass = HypothesisClass(np.stack([color, shape, np.zeros(4, int),
                                   np.ones(4, int)]))
print("\nlambda term (population):",
      lambda_term_population(hclass, scm, 2, [0, 1]))
print("VC term at d=5, m=10000, delta=0.1:", round(vc_bound_term(5, 10000, 0.1), 4))
report = theorem1_check(shape, hclass, scm, [0, 1], 2, m=10000, delta=0.1,
                        seed=0)
print(f"bound check for the shape rule: lhs={report.lhs:.3f} "
      f"rhs={report.rhs:.3f} violated={report.violated}")

# --- random-SCM verification ------------------------------------------------
print("\nBayes domain accuracy on {+90%, +80%}:",
      bayes_domain_accuracy(scm, [0, 1]))
rows, summary = verify_theory(n_instances=200, delta=0.1, m=5000, seed=0)
print("random-SCM verification:", summary)
