"""Digital-twin workbench for zero-shot fault diagnosis of axial piston pumps."""

__version__ = "0.1.0"
