"""Replica placement, rebalancing, adaptive routing and workload budgets
for segment-based OLAP clusters, plus a discrete-time simulator."""

__version__ = "0.1.0"
