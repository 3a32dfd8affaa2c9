"""Merkle hashing kernels, compiled when available.

``BACKEND`` names the implementation in use. Setting ``EXAMCHAIN_PURE_PYTHON=1``
forces the fallback, which is how the tests cover both paths.
"""
import os

if os.environ.get("EXAMCHAIN_PURE_PYTHON") == "1":
    from ._kernels_py import leaf_hashes, merkle_root, merkle_root_of
    BACKEND = "python"
else:
    try:
        from ._kernels import leaf_hashes, merkle_root, merkle_root_of
        BACKEND = "cython"
    except ImportError:  # extension not built
        from ._kernels_py import leaf_hashes, merkle_root, merkle_root_of
        BACKEND = "python"

__all__ = ["BACKEND", "leaf_hashes", "merkle_root", "merkle_root_of"]
