"""vitpad: vision-transformer face presentation-attack-detection toolkit.

A self-contained binary bonafide-vs-attack classifier built on a small
dense-tensor engine with reverse-mode differentiation, plus leave-one-out
and grandtest protocol construction, ISO/IEC 30107-3 metrics, and
per-patch relevancy-map explanations.
"""

__version__ = "0.1.0"

from .errors import VitPadError

__all__ = ["VitPadError", "__version__"]
