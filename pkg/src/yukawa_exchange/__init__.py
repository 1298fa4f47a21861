"""Boundary integral tools for the Yukawa operator -Lap + gamma^-2: layer operators,
DtN maps, exchange and scattering operators, and a sweep harness."""
__version__ = "0.1.0"
