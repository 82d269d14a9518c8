"""Learning, data and experiment services."""
