"""Agentic orchestration engine for multimodal neuroimaging workflows."""

__version__ = "0.1.0"
