"""roadflow: coarse-to-fine urban traffic flow inference with road priors."""

__version__ = "0.1.0"
