"""Backend plugins implementing the job-execution REST protocol.

Two families: a real local-process executor, and simulated batch sites
with configurable delay, capacity and availability models. Both sit
behind the same five-endpoint protocol the virtual nodes consume.
"""

from .base import (
    BackendJob,
    BackendJobState,
    MalformedRequest,
    PluginBusy,
    PluginJobRequest,
    PluginRejected,
    PluginUnavailable,
    SiteUnavailable,
)
from .local import LocalProcessBackend
from .simulated import DelaySpec, SimulatedSiteBackend, SiteModel
from .httpd import (
    FlakyPluginClient,
    HttpPluginClient,
    InProcessPluginClient,
    PluginHTTPServer,
)

__all__ = [
    "BackendJob",
    "BackendJobState",
    "DelaySpec",
    "FlakyPluginClient",
    "HttpPluginClient",
    "InProcessPluginClient",
    "LocalProcessBackend",
    "MalformedRequest",
    "PluginBusy",
    "PluginHTTPServer",
    "PluginJobRequest",
    "PluginRejected",
    "PluginUnavailable",
    "SimulatedSiteBackend",
    "SiteModel",
    "SiteUnavailable",
]
