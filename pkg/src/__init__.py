"""Hybrid NeRF - desk-scale radiance fields with hash-grid and tri-plane features."""
