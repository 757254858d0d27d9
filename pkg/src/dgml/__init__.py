"""Gated two-branch CNN+LSTM pose-change estimation at desk scale.

Subpackages:

- ``autodiff``: float64 tensors with reverse-mode differentiation.
- ``model``: the two-branch gated architecture and its ablation variants.
- ``synthdata``: deterministic paired image/tactile sequence generator.
- ``training``: mini-batch truncated-BPTT training, metrics, gate statistics.
- ``cli``: the ``dgml`` command-line experiment harness.
"""

__version__ = "0.1.0"
