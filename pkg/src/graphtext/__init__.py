"""Joint graph + text embeddings: typed graph attention, a graph-token adapter and a frozen encoder."""

__version__ = "0.1.0"
