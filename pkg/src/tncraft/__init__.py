"""Toolchain for mapping constrained CNNs onto a TrueNorth-style spiking chip."""

from importlib import resources

__version__ = "0.1.0"


def fixture_path(name: str):
    """Path of a bundled network table, e.g. ``fixture_path("deep.net")``."""
    return resources.files(__name__).joinpath("nets", name)
