"""Governance kernel for autonomous-agent fleets."""
