"""Simulated bubble offloading: apps split into bubbles that follow a mobile device."""

__version__ = "0.1.0"
