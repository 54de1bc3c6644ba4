"""hierkd - hierarchical VQA diagnostics and self-elicited distillation toolkit."""

__version__ = "0.1.0"
