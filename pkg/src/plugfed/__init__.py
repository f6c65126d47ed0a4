"""Federated appliance recognition from smart-plug power traces with
adaptive handling of noisy labels."""

__version__ = "0.1.0"
