"""Small-noise diffusions: Malliavin functionals and distances to normality."""

__version__ = "0.1.0"
