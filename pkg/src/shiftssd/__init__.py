"""Point-based 3D detector core with cross-cluster feature shifting.

Subpackages are organized by pipeline stage: spatial kernels
(`geometry`), the autodiff engine (`tensor`), the shift set-abstraction
layer (`ssa`), the toy detector (`detector`), the training objective
(`losses`), synthetic scenes and file formats (`data`), and the
experiment harness (`harness`). The `cli` module exposes everything as
one executable.
"""

__all__ = [
    "geometry",
    "tensor",
    "ssa",
    "detector",
    "losses",
    "data",
    "harness",
    "cli",
]

__version__ = "0.1.0"
