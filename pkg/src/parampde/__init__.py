"""Neural-network pricing of European basket options via the parametric Black-Scholes PDE."""

__version__ = "0.1.0"
