"""Inspecting TCP load balancer with honeypot deflection."""

__version__ = "0.1.0"
