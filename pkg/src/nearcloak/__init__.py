"""Near-cloaking of the time-harmonic Maxwell equations."""
