"""Transfer learning for spatial autoregressive models via Mallows model averaging."""

from tlmma_sar.spatial import (
    WeightMatrix,
    SpatialFilter,
    build_grid_weights,
    row_normalize,
    weights_from_edge_list,
    spatial_filter,
    reduced_form_mean,
    log_det_filter,
)
from tlmma_sar.estimators import (
    Dataset,
    SarFit,
    InstrumentSet,
    concentrated_loglik,
    fit_mle,
    build_instruments,
    fit_2sls,
    residual_variance,
)
from tlmma_sar.influence import (
    PenaltyReport,
    omega_hat,
    drho_dy_mle,
    jacobian_trace_mle,
    ddelta_dy_2sls,
    jacobian_trace_2sls,
    penalty,
    jacobian_trace_fd,
)
from tlmma_sar.averaging import (
    CandidateSet,
    CriterionProblem,
    AveragingSolution,
    candidate_predictions,
    assemble_criterion,
    solve_simplex_qp,
    evaluate_criterion,
    criterion_known_omega,
    tlmma_predict,
    nu_hat,
)

__version__ = "0.1.0"
