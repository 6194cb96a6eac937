"""Fielded BM25 search with aggregation filtering."""
