"""Regularised tensor calculus on a single chart."""
