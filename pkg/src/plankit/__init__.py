"""Code-form plan curation, symbolic benchmarks, and plan-then-answer evaluation."""

__version__ = "0.1.0"
