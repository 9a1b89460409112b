"""grainforge: a CPU-parallel discrete element method engine with dual-worker
delayed contact detection, compressed voxel coordinates, multi-sphere clumps
and pluggable contact force models."""

from .broadphase import (
    CONTACT_SA,
    CONTACT_SS,
    CONTACT_ST,
    ContactArray,
    MarginPolicy,
    closest_point_on_triangle,
    compute_margin,
    detect_contacts,
    merge_history,
)
from .core import (
    ClumpSphere,
    ClumpTemplate,
    ConfigurationError,
    Domain,
    FamilyTable,
    MaterialTable,
    OutOfDomainError,
    StateStore,
    ValidationError,
    decode_position,
    encode_position,
)
from .engine import (
    ActiveBoxPolicy,
    DivergenceError,
    Inspector,
    Simulator,
    Tracker,
    hcp_sample_box,
    hcp_sample_cylinder,
)
from .forces import (
    ContactContext,
    ContactResult,
    ForceModel,
    effective_contact_params,
    evaluate_default_model,
    get_force_model,
    register_force_model,
)

__version__ = "0.1.0"
