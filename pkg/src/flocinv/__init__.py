"""Identification of post-fragmentation measures in flocculation models."""
