"""Small-scale Llama-style language model pipeline on numpy."""

__version__ = "0.1.0"
