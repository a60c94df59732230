"""Desk-scale lab for scaled-skip residual ReLU networks.

Submodules: numkit (deterministic linear algebra and sampling), model
(network + interlayer operators), lossgrad (losses and analytic gradients),
data (margin-separable synthetic data), trainer (instrumented full-batch GD),
probes (one measured probe per provable bound), cli (command-line driver).
"""

__version__ = "0.1.0"
