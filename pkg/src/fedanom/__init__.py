"""Federated anomaly detection for IoT traffic.

Per-device autoencoders are trained on benign traffic through synchronous
federated rounds (local Adam, cross-round cosine learning rate, uniform
parameter averaging), a global detection threshold is derived from pooled
reconstruction-error statistics, and attack traffic is flagged by threshold
exceedance. Messaging runs over a topic-based pub/sub layer with loopback
and TCP backends.
"""

__version__ = "0.1.0"
