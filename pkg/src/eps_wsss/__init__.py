"""Saliency-guided weakly supervised segmentation at desk scale.

Submodules: numerics (autodiff tape, conv, SGD), model (C+1 channel
classifier), epscore (map selection and joint loss), synthdata (scenes),
pseudomask (multi-scale maps to masks), metrics, cli.
"""

__version__ = "0.1.0"
