"""Pipeline-bubble analysis and mitigation toolkit for pipelined LLM inference."""

__version__ = "0.1.0"
