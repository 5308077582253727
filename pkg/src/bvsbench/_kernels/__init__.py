"""Hot-kernel backend selection.

The compiled Cython core is preferred; the pure numpy/Python twin is used when
the extension is unavailable, when BVSBENCH_PURE=1, or when a call falls
outside the compiled kernel's envelope (block side > 8). Both backends produce
bit-identical results.
"""

from __future__ import annotations

import os

import numpy as np

from . import pure

try:  # pragma: no cover - exercised indirectly
    from . import _core
except ImportError:  # pragma: no cover
    _core = None

_FORCE_PURE = os.environ.get("BVSBENCH_PURE", "") not in ("", "0")

BACKEND = "pure" if (_core is None or _FORCE_PURE) else "compiled"


def active_backend() -> str:
    return BACKEND


def _impl():
    return pure if BACKEND == "pure" else _core


def encode_frame(c_map, lut, out_planes, offset_x, offset_y, k):
    c_map = np.ascontiguousarray(c_map, dtype=np.int64)
    if BACKEND == "compiled" and k <= 8:
        return _core.encode_frame(c_map, lut, out_planes, offset_x, offset_y, k)
    return pure.encode_frame(c_map, lut, out_planes, offset_x, offset_y, k)


def count_blocks(planes, offset_x, offset_y, k, width, height, group):
    if BACKEND == "compiled" and k <= 8:
        return _core.count_blocks(planes, offset_x, offset_y, k, width, height, group)
    return pure.count_blocks(planes, offset_x, offset_y, k, width, height, group)


def evs_events(base_counts, repeats, t0_ns, plane_period_ns, theta_on_map,
               theta_off_map, tau_ref_ns, f_dark, k_f, f_max, log_eps):
    base_counts = np.ascontiguousarray(base_counts, dtype=np.float64)
    theta_on_map = np.ascontiguousarray(theta_on_map, dtype=np.float64)
    theta_off_map = np.ascontiguousarray(theta_off_map, dtype=np.float64)
    return _impl().evs_events(
        base_counts, repeats, t0_ns, plane_period_ns, theta_on_map,
        theta_off_map, tau_ref_ns, f_dark, k_f, f_max, log_eps,
    )


def fifo_bus(t_gen, drain_ns, depth):
    t_gen = np.ascontiguousarray(t_gen, dtype=np.int64)
    return _impl().fifo_bus(t_gen, drain_ns, depth)
