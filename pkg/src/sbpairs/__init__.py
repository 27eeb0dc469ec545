"""Pairs trading by minimum-weight cycle search on a market graph, solved
with a ballistic simulated-bifurcation Ising solver."""

__version__ = "0.1.0"
