"""Binary-tree network workbench: architectures, accounting, region counting, training probes."""

__version__ = "0.1.0"
