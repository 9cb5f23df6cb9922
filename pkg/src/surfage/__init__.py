"""Geometric deep learning on triangulated surfaces.

Predicts a scalar age from four representations of the same surface:
voxel occupancy grids (3D CNN), point clouds (hierarchical set
abstraction), mesh edges (edge convolution with collapse pooling) and
graphs (spectral-free graph convolution). Includes a from-scratch
reverse-mode autodiff core, surface processing, cohort management and
full training/evaluation plumbing.
"""

import os as _os

# honor GDL_THREADS before numpy first loads its BLAS thread pools
if "GDL_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["GDL_THREADS"])

from .tensor import Tensor, Parameter, backward, fresh_tape, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "Parameter", "backward", "fresh_tape", "no_grad", "__version__"]
