"""Experiment configuration, orchestration and artifact export."""
