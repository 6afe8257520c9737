"""Multi-frame denoising laboratory: N2C, N2N and one-pot mutual supervision (OPD-RC, OPD-AL)."""

__version__ = "0.1.0"
