"""Study-conditioned functional flow matching for pharmacokinetics.

Simulate synthetic PK study populations from a mechanistic stochastic
prior, train an operator-attention flow-matching model on them, and run
zero-shot population synthesis and prefix-conditioned forecasting.
"""

__version__ = "0.1.0"
