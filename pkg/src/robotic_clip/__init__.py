"""Action-aware CLIP fine-tuning: a frame-pair adapter injects an action embedding into prompt verb slots."""

__version__ = "0.1.0"
