"""Mean-variance optimization for finite-horizon MDPs."""
