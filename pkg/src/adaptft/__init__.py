"""Learned, task-dependent and content-adaptive audio front-ends."""

__version__ = "0.1.0"
