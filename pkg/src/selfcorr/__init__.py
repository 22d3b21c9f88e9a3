"""Weakly supervised segmentation with self-correcting networks."""
