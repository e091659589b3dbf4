"""ID-representation alignment for LLM-based recommendation, at desk scale."""

__version__ = "0.1.0"
