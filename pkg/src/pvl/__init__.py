"""Persona-vector lab: a deterministic toy transformer with residual- and
attention-stream instrumentation and persona-vector tooling."""

__version__ = "0.1.0"
