"""Utility modules for the off-policy evaluation bench."""
