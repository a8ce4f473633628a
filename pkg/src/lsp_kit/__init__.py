"""Learned sparse projectors for offloaded fine-tuning, plus a pipeline simulator."""

__version__ = "0.1.0"
