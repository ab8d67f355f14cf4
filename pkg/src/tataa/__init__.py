"""TATAA - compiler, simulator and reports for a dual-mode int8/bfloat16 transformer accelerator."""

__version__ = "0.1.0"
