"""Pure-Python / numpy fallback for the hot kernels.

Bit-for-bit interchangeable with the compiled backend in `_core`: the packed
plane bytes, block counts, event times and bus departures must match exactly.
The event-dynamics loop therefore mirrors the C arithmetic operation for
operation (math.log/math.exp hit the same libm; the extension is built with
FMA contraction off).
"""

from __future__ import annotations

import math

import numpy as np

BACKEND = "pure"


def encode_frame(c_map, lut, out_planes, offset_x, offset_y, k):
    """Pack one frame's M planes from the per-pixel level map.

    c_map: (H, W) int64 on-slot counts; lut: (levels, M, k, k) bool;
    out_planes: (M, dmd_height, stride) uint8, zero-initialized.
    """
    height, width = c_map.shape
    m_planes = lut.shape[1]
    dmd_h = out_planes.shape[1]
    stride = out_planes.shape[2]
    dmd_bits = stride * 8
    full = np.zeros((dmd_h, dmd_bits), dtype=np.uint8)
    ys = slice(offset_y, offset_y + height * k)
    xs = slice(offset_x, offset_x + width * k)
    for m in range(m_planes):
        blocks = lut[c_map, m]  # (H, W, k, k)
        mirrors = blocks.transpose(0, 2, 1, 3).reshape(height * k, width * k)
        full[:] = 0
        full[ys, xs] = mirrors
        out_planes[m, :, :] = np.packbits(full, axis=1)


def count_blocks(planes, offset_x, offset_y, k, width, height, group):
    """On-mirror counts per k x k block, summed over plane groups.

    planes: (n, dmd_h, stride) uint8; returns (n // group, height, width) int64.
    """
    n_planes = planes.shape[0]
    out = np.zeros((n_planes // group, height, width), dtype=np.int64)
    for i in range(n_planes):
        bits = np.unpackbits(planes[i], axis=1)
        region = bits[offset_y : offset_y + height * k, offset_x : offset_x + width * k]
        sums = region.reshape(height, k, width, k).sum(axis=(1, 3), dtype=np.int64)
        out[i // group] += sums
    return out


_TWO_PI = 6.283185307179586


def evs_events(
    base_counts,
    repeats,
    t0_ns,
    plane_period_ns,
    theta_on_map,
    theta_off_map,
    tau_ref_ns,
    f_dark,
    k_f,
    f_max,
    log_eps,
):
    """Per-pixel threshold-crossing events from the piecewise-constant plane signal.

    Returns (t_ns, x, y, polarity) in pixel-major, per-pixel chronological order.
    """
    n_base, height, width = base_counts.shape
    n_planes = n_base * repeats
    period = float(plane_period_ns)

    ts: list[int] = []
    xs: list[int] = []
    ys: list[int] = []
    ps: list[int] = []

    for y in range(height):
        for x in range(width):
            theta_on = float(theta_on_map[y, x])
            theta_off = float(theta_off_map[y, x])
            lvl = math.log(float(base_counts[0, y, x]) + log_eps)
            l_ref = lvl
            next_allowed = -math.inf
            for i in range(n_planes):
                intensity = float(base_counts[i % n_base, y, x])
                target = math.log(intensity + log_eps)
                fc = f_dark + k_f * intensity
                if fc > f_max:
                    fc = f_max
                t_start = float(t0_ns + i * plane_period_ns)
                t_end = t_start + period
                if math.isinf(fc):
                    # Lag-free: the filter lands on target at the plane start.
                    # Compare the reference (not the previous level) so crossings
                    # deferred by the refractory period still fire later.
                    lvl = target
                    while l_ref + theta_on <= lvl:
                        t_event = t_start if t_start > next_allowed else next_allowed
                        if t_event >= t_end:
                            break
                        ts.append(int(math.floor(t_event + 0.5)))
                        xs.append(x)
                        ys.append(y)
                        ps.append(1)
                        l_ref += theta_on
                        next_allowed = t_event + tau_ref_ns
                    while l_ref - theta_off >= lvl:
                        t_event = t_start if t_start > next_allowed else next_allowed
                        if t_event >= t_end:
                            break
                        ts.append(int(math.floor(t_event + 0.5)))
                        xs.append(x)
                        ys.append(y)
                        ps.append(-1)
                        l_ref -= theta_off
                        next_allowed = t_event + tau_ref_ns
                    continue
                tau = 1e9 / (_TWO_PI * fc)
                if lvl < target:
                    while True:
                        thr = l_ref + theta_on
                        if thr - target >= 0.0:
                            break
                        if thr <= lvl:
                            t_cross = t_start
                        else:
                            t_cross = t_start + tau * math.log((lvl - target) / (thr - target))
                        t_event = t_cross if t_cross > next_allowed else next_allowed
                        if t_event >= t_end:
                            break
                        ts.append(int(math.floor(t_event + 0.5)))
                        xs.append(x)
                        ys.append(y)
                        ps.append(1)
                        l_ref = thr
                        next_allowed = t_event + tau_ref_ns
                elif lvl > target:
                    while True:
                        thr = l_ref - theta_off
                        if thr - target <= 0.0:
                            break
                        if thr >= lvl:
                            t_cross = t_start
                        else:
                            t_cross = t_start + tau * math.log((lvl - target) / (thr - target))
                        t_event = t_cross if t_cross > next_allowed else next_allowed
                        if t_event >= t_end:
                            break
                        ts.append(int(math.floor(t_event + 0.5)))
                        xs.append(x)
                        ys.append(y)
                        ps.append(-1)
                        l_ref = thr
                        next_allowed = t_event + tau_ref_ns
                lvl = target + (lvl - target) * math.exp(-period / tau)

    return (
        np.asarray(ts, dtype=np.int64),
        np.asarray(xs, dtype=np.int32),
        np.asarray(ys, dtype=np.int32),
        np.asarray(ps, dtype=np.int8),
    )


def fifo_bus(t_gen, drain_ns, depth):
    """Constant-rate FIFO: departure = max(arrival, prev + drain); an event whose
    wait would exceed depth * drain is dropped (drop-newest).

    t_gen must be sorted ascending. Returns (t_out int64, dropped bool);
    dropped entries carry t_out = 0.
    """
    n = t_gen.shape[0]
    t_out = np.zeros(n, dtype=np.int64)
    dropped = np.zeros(n, dtype=bool)
    cap = depth * drain_ns
    prev = -math.inf
    for i in range(n):
        t = float(t_gen[i])
        cand = prev + drain_ns
        if t > cand:
            cand = t
        if cand - t > cap:
            dropped[i] = True
            continue
        t_out[i] = int(math.floor(cand + 0.5))
        prev = cand
    return t_out, dropped
