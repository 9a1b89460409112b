"""Central data-width configuration.

Every array dtype the solver uses is declared here so the storage budget can
be retuned in one place (wider family tags, uncompressed coordinates, ...)
without touching the physics code.

Layout of a compressed position: one 64-bit voxel index packing three
21-bit per-axis voxel coordinates (x in the lowest bits), plus three 16-bit
sub-voxel coordinates, each splitting a voxel edge into 2**16 parts.  For a
cubic 1 m domain this resolves ~7.3e-12 m per axis.
"""

import numpy as np

# Contact history, wildcards, geometry parameters, quaternions.
REAL = np.float32
# Owner kinematic state (velocities, mass properties).  Wider than the
# GPU-style 32-bit layout: per-step accumulation in 32 bits drifts ~1e-5
# over 10^3 steps, which the integrator contract does not allow.
STATE_REAL = np.float64
# Per-contact scratch arithmetic (penetration depth, force composition).
SCRATCH = np.float64
# Group label used for prescribed motion, masking and freezing.
FAMILY = np.uint8
NUM_FAMILIES = 256

# Compressed coordinate storage.
VOXEL_INDEX = np.uint64
SUBVOXEL = np.uint16
VOXEL_BITS_PER_AXIS = 21
SUBVOXEL_BITS = 16
VOXELS_PER_AXIS = 1 << VOXEL_BITS_PER_AXIS
SUBVOXELS_PER_EDGE = 1 << SUBVOXEL_BITS

# Array indices / ids.
INDEX = np.int64
MATERIAL_ID = np.uint8

# Mass stand-in for bodies whose motion is never force-driven (meshes,
# analytic boundaries).  Large enough that effective-mass terms reduce to
# the clump-side mass, small enough to stay finite in float32.
BOUNDARY_MASS = 1.0e14
