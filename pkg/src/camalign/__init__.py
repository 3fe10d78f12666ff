"""CAM decomposition into norm and similarity factors, alignment losses,
attentive dropout, and a weakly-supervised localization evaluation stack —
all on a small from-scratch float64 autodiff engine."""

__version__ = "0.1.0"
