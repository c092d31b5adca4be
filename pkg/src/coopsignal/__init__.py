"""Cooperative multi-agent DDPG traffic-signal control on a queue simulator."""

__version__ = "0.1.0"
