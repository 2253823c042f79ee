"""In-pod web server.

Loads a binding table, imports the package's handler files, and serves
one HTTP route per bound function with a fixed-size worker pool. Started
by the orchestrator as a subprocess:

    python -m agenthost --bindings <bindings.json> --port <int> \
        --workers <int> --workdir <snapshot dir>

Deliberately self-contained (stdlib only): the platform talks to it only
through this argv contract, the bindings file format, and HTTP.
"""

from .server import HostConfig, PodServer, load_bindings, main

__all__ = ["HostConfig", "PodServer", "load_bindings", "main"]
