"""Context-dependent text-to-SQL with reformulation-consistency training."""

__version__ = "0.1.0"
