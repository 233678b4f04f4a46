"""Knowledge distillation study kit for small seq2seq transformers (numpy only)."""

__version__ = "0.1.0"
