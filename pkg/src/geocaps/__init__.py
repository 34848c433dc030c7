"""Geometric capsule autoencoder for 3D point clouds.

Two unsupervised capsule layers: points are grouped into part capsules
(pose + small feature) by iterative routing against decoded part surfaces,
and part capsules are summarized into a single object capsule whose
feature is trained to agree across randomly perturbed viewpoints.  All
training runs on the package's own reverse-mode autodiff core.
"""

import importlib

__version__ = "0.1.0"

# Re-exports resolve on first use so that importing the package (e.g. via
# the console script) does not pull in numpy before the CLI has had a
# chance to pin the BLAS thread-count environment variables.
_EXPORTS = {"Tensor": "tensor", "no_grad": "tensor", "Pose": "geometry"}


def __getattr__(name):
    if name in _EXPORTS:
        value = getattr(importlib.import_module(f".{_EXPORTS[name]}", __name__), name)
        globals()[name] = value
        return value
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted([*globals(), *_EXPORTS])
