"""Multi-head physics-informed neural networks with normalizing-flow head priors."""

__version__ = "0.1.0"
