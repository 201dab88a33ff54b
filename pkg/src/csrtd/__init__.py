"""Co-scale cross-attentional transformer for rearrangement target detection."""

__version__ = "0.1.0"
