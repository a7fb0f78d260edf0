"""Latte: few-shot tabular learning guided by LLM latent knowledge."""

__version__ = "0.1.0"
