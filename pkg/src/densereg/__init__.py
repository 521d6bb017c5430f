"""Registration-free fitting of a topology-consistent parametric head mesh to multi-view scans."""

import os

# the TBB layer shipped in some images is too old for numba; fall back quietly
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
