"""Cross-lingual multi-speaker TTS with triplet fine-tuning, at toy scale."""

__version__ = "0.1.0"
