"""Secure averaging of sparse linear classifiers with doubly-permuted Paillier encryption."""

__version__ = "0.1.0"
