"""podbay: a self-hosted function platform.

Takes a zipped package of Python handler functions plus a declarative
YAML manifest, builds it into an immutable artifact, deploys it as
replicated pod processes behind a dynamic reverse proxy, publishes an
OpenAPI description per package, and ships a load-testing harness for
measuring end-to-end latency under concurrency.
"""

__version__ = "0.1.0"
