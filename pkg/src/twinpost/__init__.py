"""Photon-number-resolved postselection from two twin beams.

Simulation of the multimode Gaussian field and pixel detectors, inversion of
the detection (maximum likelihood and a constrained Gaussian fit), and
certification/quantification of the postselected states' nonclassicality.
"""

from ._version import __version__
from .detector_model import (
    DetectionMatrix,
    DetectorConfig,
    Histogram3D,
    conditional_histogram,
    detection_matrix,
    forward_histogram,
    postselect_on_counts,
    sample_histogram,
)
from .field_model import (
    CompositeFieldParams,
    JointDist,
    JointDist2D,
    JointDist3D,
    ModeField,
    MomentSet,
    auto_cutoffs,
    compose_noisy_3d,
    ideal_postselected_state,
    intensity_moments,
    mandel_rice_pmf,
    moments_intensity_to_photon,
    moments_photon_to_intensity,
    paired_3d,
    photon_moments,
    postselection_weights,
    thermal_params_from_moments,
    truncate_mass,
    twb_joint_pmf,
)
from .nonclassicality import (
    CW,
    MW,
    CriterionReport,
    HybridCriterion,
    MomentCriterion,
    NcdReport,
    OrderingContext,
    ProbabilityCriterion,
    ccs_criterion,
    covariance_delta,
    fano,
    hybrid_L,
    local_criterion_maps,
    matrix_criterion,
    ncd,
    ncd_local_map,
    noise_reduction_plus,
    ordering_transform_moments,
    probability_criteria,
)
from .quasidist import (
    NegativityReport,
    QuasiGrid,
    negativity_report,
    quasi_distribution,
    s_ordered_pmf,
)
from .reconstruction import (
    EmResult,
    EmSettings,
    GaussianFitResult,
    Step1Result,
    combine_idler_moments,
    declination,
    em_reconstruct_2d,
    em_reconstruct_3d,
    empirical_intensity_moments,
    gaussian_fit_step1,
    gaussian_fit_step2,
)

__all__ = [name for name in dir() if not name.startswith("_")]
