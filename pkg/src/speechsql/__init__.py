"""End-to-end speech-to-SQL parsing at desk scale."""

__version__ = "0.1.0"
