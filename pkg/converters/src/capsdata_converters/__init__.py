"""Offline dataset converters.

One script per dataset turns the third-party source containers (SVHN
cropped-digits .mat, Small-NORB binary matrices) into the canonical tensor
container the training pipeline consumes, writing a conversion manifest
with checksums beside the outputs. The numeric core never parses source
archive formats; that isolation is the whole point of this package.
"""

__version__ = "0.1.0"
