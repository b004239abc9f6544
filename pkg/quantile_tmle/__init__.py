from ._core import (
    AtomIndex,
    clamp_propensity,
    invert_cdf,
    make_uniform_grid,
    marginal_cdf,
    weighted_quantile,
)
from ._density_sl import (
    FittedHazardDensity,
    HazardDensityCandidate,
    RepeatedMeasures,
    cv_risk,
    default_library,
    denby_mallows_boundaries,
    expand_repeated_measures,
    stack_weights,
    to_grid,
)
from ._estimators import (
    ArmEstimate,
    effect_on_quantile,
    estimate,
    estimate_aipw,
    estimate_firpo,
    estimate_ipw,
    estimate_od,
    tmle_att,
    tmle_missing,
)
from ._inference import (
    density_at,
    effect_report,
    eif_att,
    eif_missing,
    quantile_report,
    wald_report,
    wald_test_effect,
)
from ._nuisance import (
    discretize_gaussian,
    fit_gaussian_regression,
    fit_logistic,
    quantile_levels,
)
from ._sim import (
    KangSchaferSample,
    fit_scenario,
    generate_ks,
    ks_truth,
    run_monte_carlo,
    shift_power,
)

__all__ = [
    "ArmEstimate",
    "AtomIndex",
    "FittedHazardDensity",
    "HazardDensityCandidate",
    "KangSchaferSample",
    "RepeatedMeasures",
    "clamp_propensity",
    "cv_risk",
    "default_library",
    "denby_mallows_boundaries",
    "density_at",
    "discretize_gaussian",
    "effect_on_quantile",
    "effect_report",
    "eif_att",
    "eif_missing",
    "estimate",
    "estimate_aipw",
    "estimate_firpo",
    "estimate_ipw",
    "estimate_od",
    "expand_repeated_measures",
    "fit_gaussian_regression",
    "fit_logistic",
    "fit_scenario",
    "generate_ks",
    "invert_cdf",
    "ks_truth",
    "make_uniform_grid",
    "marginal_cdf",
    "quantile_levels",
    "quantile_report",
    "run_monte_carlo",
    "shift_power",
    "stack_weights",
    "tmle_att",
    "tmle_missing",
    "to_grid",
    "wald_report",
    "wald_test_effect",
    "weighted_quantile",
]
