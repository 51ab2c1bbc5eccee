"""Test modules for the off-policy evaluation library."""
