"""
SWLE Toolkit

Score-based weighted likelihood estimation for exponential-dispersion GLMs,
with Wald-type misspecification diagnostics for complete, censored and
truncated data.
"""
__version__ = "1.0.0"
