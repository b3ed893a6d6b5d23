"""Reduction of a quasi-periodically forced linear wave equation to a constant
block-diagonal Hamiltonian system by a finite-truncation KAM iteration.

Modules: torus_fourier (series on the torus), wave_model (model preparation),
smoothing, kam_core (the iteration), resonance (small divisors), verify
(independent checks) and cli.
"""

__version__ = "0.1.0"
