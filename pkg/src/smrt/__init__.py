"""Sparse multiple-regulation estimation and stepdown testing."""
