"""Normal forms, small divisors and lattice dynamics for the quasi-periodic NLS."""

__version__ = "0.1.0"
