"""Token-aware contrastive continual pre-training for a small BERT-style encoder."""

__version__ = "0.1.0"
