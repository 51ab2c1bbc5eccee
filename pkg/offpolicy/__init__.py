"""Off-policy value evaluation for finite-horizon MDPs."""
