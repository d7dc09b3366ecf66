"""Desk-scale conditioned acoustic model and its pre-train / adapt protocol."""
