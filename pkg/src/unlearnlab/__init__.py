"""Benign-data over-unlearning laboratory."""
