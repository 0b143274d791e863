"""Graph in-context learning: tokenization, two-stage ICL transformer,
prototypical prediction, and episodic multi-task pre-training."""

__version__ = "0.1.0"
