"""Fast adaptation benchmark for learned MU-MIMO precoding.

Subpackages: autodiff (complex reverse-mode engine), channel (correlated
task suites), wmmse (classic solver and differentiable rate graphs),
precoders (learned models), training (joint / fine-tune / meta / multi-task),
bench (experiment driver), cli (command line).
"""

__version__ = "0.1.0"
