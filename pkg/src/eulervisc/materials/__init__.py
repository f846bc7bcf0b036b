"""Stored energies, regularization and stress maps."""
from .convexity import (DomainBox, ProbeReport, central_hessian, convexity_probe, fj_power_hessian_det,
                        fj_power_hessian_numeric, fj_power_identity_check, kinetic_hessian, kinetic_hessian_det,
                        kinetic_hessian_psd, kinetic_identity_check)
from .energies import (CALIBRATIONS, BarotropicFluid, ConvexEnergy, FJPower, MooneyRivlin, NeoHookean,
                       PolyconvexEnergy, QuadraticEnergy, ReferentialNeoHookean, calibrated_h)
from .small import IsotropicQuadraticEnergy, cauchy_small, dphi_small, phi_small
from .stress import (ReferentialEnergy, actual_gradient, cauchy_from_actual, cauchy_from_referential, h_mandel,
                     h_stress, mandel_from_referential, stress_M, stress_pair, stress_T)
from .yosida import ProxConvergenceError, YosidaRegularizedEnergy, YosidaValue, moreau_envelope, prox, yosida_eval

__all__ = [
    "DomainBox", "ProbeReport", "central_hessian", "convexity_probe", "fj_power_hessian_det",
    "fj_power_hessian_numeric", "kinetic_hessian", "kinetic_hessian_det", "kinetic_hessian_psd",
    "kinetic_identity_check", "fj_power_identity_check",
    "CALIBRATIONS", "BarotropicFluid", "ConvexEnergy", "FJPower", "MooneyRivlin", "NeoHookean",
    "PolyconvexEnergy", "QuadraticEnergy", "ReferentialNeoHookean", "calibrated_h",
    "IsotropicQuadraticEnergy", "cauchy_small", "dphi_small", "phi_small",
    "ReferentialEnergy", "actual_gradient", "cauchy_from_actual", "cauchy_from_referential", "h_mandel",
    "h_stress", "mandel_from_referential", "stress_M", "stress_pair", "stress_T",
    "ProxConvergenceError", "YosidaRegularizedEnergy", "YosidaValue", "moreau_envelope", "prox", "yosida_eval",
]
