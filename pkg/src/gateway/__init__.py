"""Opportunistic batch gateway with remote offloading.

A single admission gateway validates and queues user workloads, admits
batch jobs into idle local capacity, evicts them when interactive
sessions contend, and routes offload-compatible jobs to remote sites
through virtual nodes speaking a small REST plugin protocol.  A
deterministic scenario runner drives the whole stack in simulated time.
"""

__version__ = "0.1.0"
