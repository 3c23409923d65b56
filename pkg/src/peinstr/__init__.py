"""Static instrumentation of PE binaries for coverage-guided fuzzing."""

__version__ = "0.1.0"
