"""Bundled data files (plain-text word lists)."""
