"""Shared-basis vocabulary transplant, breaker-token design and audits."""

__version__ = "0.1.0"
