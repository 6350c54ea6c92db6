"""Estimation, inference and simulation services."""

from psgel.services.bound_service import (
    PopulationCriterion,
    build_operator,
    truncation_sweep,
    v0_bound,
    varpi_profile,
)
from psgel.services.dgp_service import Oracle, build_oracle, oracle_theta0, simulate
from psgel.services.estimator_service import (
    effective_sieve,
    pseudo_true,
    psgel_fit,
    psgel_fit_restricted,
)
from psgel.services.gel_service import inner_maximize, s_family
from psgel.services.inference_service import (
    build_m_l,
    ci_invert,
    qlr,
    self_normalized_ci,
)
from psgel.services.moment_service import build_bases, g_bar, h_mat
from psgel.services.sieve_service import build_h_basis, build_q_basis

__all__ = [
    "Oracle",
    "PopulationCriterion",
    "build_bases",
    "build_h_basis",
    "build_m_l",
    "build_operator",
    "build_oracle",
    "build_q_basis",
    "ci_invert",
    "effective_sieve",
    "g_bar",
    "h_mat",
    "inner_maximize",
    "oracle_theta0",
    "pseudo_true",
    "psgel_fit",
    "psgel_fit_restricted",
    "qlr",
    "s_family",
    "self_normalized_ci",
    "simulate",
    "truncation_sweep",
    "v0_bound",
    "varpi_profile",
]
