"""Desk-scale measurement harness: TTFB, RTT and a failover drill."""

from .cluster import ClusterError, LocalCluster, NodeHandle, debug_stats

__all__ = ["ClusterError", "LocalCluster", "NodeHandle", "debug_stats"]
