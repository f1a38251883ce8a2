"""Queue-network simulator and training lab for communicating schedulers."""
