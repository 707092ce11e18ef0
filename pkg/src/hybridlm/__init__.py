"""Desk-scale hybrid Mamba/MoE/attention LM laboratory.

Subpackages cover the dense tensor/autodiff substrate (`tensor`), bit-exact
low-precision formats and simulated quantized GEMMs (`quant`), sequence
mixing layers (`layers`), expert routing (`moe`), model assembly and
training (`model`), generation and evaluation probes (`inference`), and the
experiment harness (`harness`).
"""

__version__ = "0.1.0"
