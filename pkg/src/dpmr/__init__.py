"""Logistic-regression training and classification as a chain of map-reduce jobs.

Parameters travel through the jobs alongside the data instead of living in a
parameter server.
"""

__version__ = "0.1.0"
