"""psgel - penalized sieve GEL for weighted average derivatives of quantile IV regressions."""

__version__ = "0.1.0"
