"""Self-supervised pre-training and fine-tuning for personalized search re-ranking."""

__version__ = "0.1.0"
