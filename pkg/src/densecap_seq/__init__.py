"""Desk-scale dense video captioning pipeline.

Event proposal scoring, pointer-style event-sequence selection, hierarchical
caption generation, supervised training and self-critical fine-tuning, all on
a small numpy-backed reverse-mode autodiff core and a synthetic episode
corpus.
"""

__version__ = "0.1.0"
