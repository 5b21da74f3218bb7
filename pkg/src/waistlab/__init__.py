"""Numerical laboratory for free-period variational dynamics on tori and the 2-sphere."""

from .manifold import ConfigSpace, torus_displacement, torus_wrap
from .lagrangian import (
    LagrangianModel,
    el_flow,
    energy,
    flow_rhs,
    flow_rhs_jacobian,
    lagrangian_value,
    make_system,
    system_names,
)
from .action import (
    ActionReport,
    DiscreteLoop,
    action,
    action_gradient,
    action_hessian_spectrum,
    iterate_loop,
    loop_distance,
    resample_loop,
    reverse_loop,
)
from .critvals import (
    AubryReport,
    CriticalBracket,
    CriticalValueReport,
    action_potential,
    aubry_points,
    critical_report,
    e0,
    mane_critical,
    negative_loop_via_descent,
    negative_loop_via_graph,
    segment_action,
)
from .orbits import (
    MinmaxResult,
    OrbitRecord,
    StruweScan,
    WaistNotFound,
    descend_loop,
    find_waist,
    mountain_pass,
    refine_orbit,
    struwe_scan,
    waist_threshold_scan,
)
from .floquet import (
    CylinderBranch,
    StabilityReport,
    TwistFit,
    attach_stability,
    birkhoff_lewis_probe,
    classify,
    classify_matrix,
    continue_cylinder,
    monodromy,
    twist_fit,
    unit_multiplier_geometric_count,
)

__version__ = "0.1.0"
