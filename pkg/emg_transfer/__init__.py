"""Transfer learning for sEMG hand-posture classification."""
