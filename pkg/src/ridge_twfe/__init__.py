"""Ridge two-way fixed effects on sparse bipartite worker-firm networks."""

__version__ = "0.1.0"
