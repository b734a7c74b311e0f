"""Darcy flow in fractured porous media on non-conforming meshes.

The coupling between matrix, fractures and traces is enforced by
minimising a quadratic mismatch functional under the discrete flow
equations; see the README for an overview.
"""

__version__ = "0.1.0"
