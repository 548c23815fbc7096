"""Linear-morphological hybrid network components."""
