"""LLM-assisted NER corpus annotation with random and retrieved in-context examples."""

__version__ = "0.1.0"
