"""Leader-guided evacuation of active particles.

A generalized Vicsek crowd simulator with a controllable leader, two
observation encodings for the leader's policy (a flat feed-forward layout and
a pseudo-gravitational force summary), a clipped policy-gradient trainer, and
an evaluation harness (evacuation curves, policy direction fields, exponent
sweeps).
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
