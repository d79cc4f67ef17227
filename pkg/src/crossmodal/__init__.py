"""Cross-modal product retrieval: multimodal transformer pretraining,
adversarial dual-encoder fine-tuning, and embedding-based serving."""

__version__ = "0.1.0"
