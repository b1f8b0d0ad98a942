"""Multi-task transformer kinodynamics for off-road ground vehicles, built on a numpy autodiff core."""

__version__ = "0.1.0"
