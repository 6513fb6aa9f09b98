"""Minor concentration of neural-network Jacobians and a finite Kolmogorov-Arnold construction."""

__version__ = "0.1.0"
