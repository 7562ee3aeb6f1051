"""pilekit: dynamic-resolution particle-graph dynamics and MPC for pushing
granular object piles in a built-in 2-D simulator."""

from . import autodiff, config, gnn, io, perception, planner, selector, sim, sort_planner

__all__ = ["autodiff", "config", "gnn", "io", "perception", "planner",
           "selector", "sim", "sort_planner"]

__version__ = "0.1.0"
