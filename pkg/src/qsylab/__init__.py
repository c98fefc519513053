"""qsylab: a reliability laboratory for quantized DNN accelerators.

Fixed-point inference on a weight-stationary systolic-array execution model,
persistent activation bit-flip injection, range-check mitigation, statistically
sized fault campaigns, and analytic hardware cost estimates across
quantization levels.
"""

__version__ = "0.1.0"
