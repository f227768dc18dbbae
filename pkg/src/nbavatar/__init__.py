"""Mesh-anchored neural billboards for animatable avatars.

Submodules
----------
mesh, quaternion
    Triangle meshes, polygon frames, cotangent Laplacian, rotations.
billboards, anchor
    Billboard parameters, initialization and posing on a deforming mesh.
raster
    Tiled differentiable rasterizer with an all-pairs reference.
decoder
    Hand-differentiated U-Net turning feature images into color and opacity.
losses, optim
    Objectives, Adam and finite-difference checks.
synth, trainer, io, checks, cli
    Synthetic data, training loop, file formats, validation suites, command line.
"""
import os as _os
import warnings as _warnings

# prefer a threading backend that is always present and quiet about versions;
# set through the environment so numba is not imported before the command
# line has had a chance to fix the thread count
_os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp workqueue tbb")
_warnings.filterwarnings("ignore", message="The TBB threading layer requires")

__version__ = "0.1.0"
