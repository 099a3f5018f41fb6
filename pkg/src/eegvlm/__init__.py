"""Hierarchical vision-language sleep staging from rendered EEG epochs."""

import os

# oneDNN's AVX-512 convolution backward intermittently corrupts the heap on
# some CPUs; AVX2 kernels are stable. Set the variable yourself to override.
os.environ.setdefault("ONEDNN_MAX_CPU_ISA", "AVX2")

from .stages import CLASS_ORDER, EXCLUDED, Stage  # noqa: E402

__version__ = "0.1.0"
