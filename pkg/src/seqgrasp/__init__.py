"""Sequential two-object grasp synthesis, validation, merging and generation for a multi-fingered hand."""

__version__ = "0.1.0"
