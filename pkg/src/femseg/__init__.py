"""femseg: a differentiable segmentation engine for proximal femur MR volumes.

Submodules:

- :mod:`femseg.autodiff` -- tape-based reverse-mode autodiff over n-d arrays
- :mod:`femseg.model` -- 2D/3D encoder-decoder network builder and forward pass
- :mod:`femseg.data` -- volume file format, manifests, resampling, phantoms
- :mod:`femseg.training` -- loss, optimizer, early stopping, cross-validation
- :mod:`femseg.inference` -- tiled mirror-padded prediction and post-processing
- :mod:`femseg.metrics` -- confusion-based scores, ROC/PR curves, reports
- :mod:`femseg.cli` -- command-line entry points
"""

__version__ = "0.1.0"
