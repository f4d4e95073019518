"""
stablelab: Monte Carlo and quadrature laboratory for the product of an
isotropic alpha-stable process and a vertical Brownian motion on the upper
half-space.
"""
__version__ = "0.3.0"
