"""discgen: two-stage hypernetwork policy generation on a synthetic
pick-and-place benchmark, with entangled baselines and evaluation protocols.
"""

__version__ = "0.1.0"
