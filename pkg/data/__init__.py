"""Oracle values for off-policy evaluation tests."""
