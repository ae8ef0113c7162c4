"""Numerical laboratory for epsilon-regularity of optimal transport maps on grids.

The package root stays import-light so that the command line can set thread
limits before numpy is loaded. Import the submodules directly.
"""

__version__ = "0.1.0"
