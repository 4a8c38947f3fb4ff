"""nrlangevin -- nonreversible Langevin samplers and variance experiments."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("nrlangevin")
except PackageNotFoundError:
    # Package is not installed (e.g., running from source without pip install)
    __version__ = "0.0.0+dev"
