"""Multimodal image matching with routed modal assistants, trained from scratch on synthetic pairs."""
__version__ = "0.1.0"
