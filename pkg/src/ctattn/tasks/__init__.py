"""Synthetic benchmarks: irregularly sampled spirals and marked event sequences."""
