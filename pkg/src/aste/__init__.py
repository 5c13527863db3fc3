"""Span-based aspect-sentiment triplet extraction with search-based
aspect-opinion pairing and an order-invariant triplet transformer."""

__version__ = "0.1.0"
