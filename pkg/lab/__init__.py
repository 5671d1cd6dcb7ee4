"""Numerical modules: chain simulation, M-estimation, theory, spectral checks, Berry-Esseen metrics."""
