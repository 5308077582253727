# Compiled twins of the pure-Python kernels in pure.py.
#
# Contract: byte- and bit-identical outputs. Arithmetic ordering below mirrors
# pure.py line for line; the build disables FMA contraction so float results
# match CPython's libm-based math module exactly.

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, exp, floor, isinf, log
from libc.stdlib cimport free, malloc, realloc

cnp.import_array()

BACKEND = "compiled"

cdef extern from *:
    int __builtin_popcount(unsigned int) nogil

cdef double _TWO_PI = 6.283185307179586


def encode_frame(cnp.ndarray[cnp.int64_t, ndim=2] c_map,
                 lut,
                 cnp.ndarray[cnp.uint8_t, ndim=3] out_planes,
                 int offset_x, int offset_y, int k):
    """Pack one frame's planes; see pure.encode_frame. Requires k <= 8."""
    if k > 8:
        raise ValueError("compiled encode_frame supports block side <= 8")
    # (levels, M, k) with each block row's bits MSB-aligned in one byte.
    rows_np = np.packbits(np.asarray(lut, dtype=np.uint8), axis=3)[:, :, :, 0]
    cdef cnp.ndarray[cnp.uint8_t, ndim=3] rows = np.ascontiguousarray(rows_np)
    cdef Py_ssize_t height = c_map.shape[0]
    cdef Py_ssize_t width = c_map.shape[1]
    cdef Py_ssize_t m_planes = rows.shape[1]
    cdef Py_ssize_t y, x, m, r
    cdef long long c
    cdef int bit_x, byte0, shift, row
    cdef unsigned int pattern
    with nogil:
        for y in range(height):
            for x in range(width):
                c = c_map[y, x]
                if c == 0:
                    continue
                bit_x = offset_x + <int>x * k
                byte0 = bit_x >> 3
                shift = bit_x & 7
                for m in range(m_planes):
                    for r in range(k):
                        pattern = rows[c, m, r]
                        if pattern == 0:
                            continue
                        row = offset_y + <int>y * k + r
                        out_planes[m, row, byte0] |= <unsigned char>(pattern >> shift)
                        if shift + k > 8:
                            out_planes[m, row, byte0 + 1] |= <unsigned char>((pattern << (8 - shift)) & 0xFF)


def count_blocks(cnp.ndarray[cnp.uint8_t, ndim=3] planes,
                 int offset_x, int offset_y, int k,
                 int width, int height, int group):
    """Per-block on counts summed over plane groups; see pure.count_blocks."""
    if k > 8:
        raise ValueError("compiled count_blocks supports block side <= 8")
    cdef Py_ssize_t n_planes = planes.shape[0]
    cdef Py_ssize_t stride = planes.shape[2]
    out_np = np.zeros((n_planes // group, height, width), dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=3] out = out_np
    cdef Py_ssize_t i, y, x, r, g
    cdef int bit_x, byte0, shift, row
    cdef unsigned int combined, mask
    cdef long long cnt
    mask = (1u << k) - 1u
    with nogil:
        for i in range(n_planes):
            g = i // group
            for y in range(height):
                for x in range(width):
                    bit_x = offset_x + <int>x * k
                    byte0 = bit_x >> 3
                    shift = bit_x & 7
                    cnt = 0
                    for r in range(k):
                        row = offset_y + <int>y * k + r
                        combined = (<unsigned int>planes[i, row, byte0]) << 8
                        if byte0 + 1 < stride:
                            combined |= planes[i, row, byte0 + 1]
                        cnt += __builtin_popcount((combined >> (16 - shift - k)) & mask)
                    out[g, y, x] += cnt
    return out_np


cdef struct EventBuf:
    long long* t
    int* x
    int* y
    signed char* p
    Py_ssize_t size
    Py_ssize_t cap


cdef int _buf_push(EventBuf* buf, long long t, int x, int y, signed char p) nogil:
    cdef Py_ssize_t cap
    if buf.size == buf.cap:
        cap = buf.cap * 2
        buf.t = <long long*>realloc(buf.t, cap * sizeof(long long))
        buf.x = <int*>realloc(buf.x, cap * sizeof(int))
        buf.y = <int*>realloc(buf.y, cap * sizeof(int))
        buf.p = <signed char*>realloc(buf.p, cap * sizeof(signed char))
        if buf.t == NULL or buf.x == NULL or buf.y == NULL or buf.p == NULL:
            return -1
        buf.cap = cap
    buf.t[buf.size] = t
    buf.x[buf.size] = x
    buf.y[buf.size] = y
    buf.p[buf.size] = p
    buf.size += 1
    return 0


def evs_events(cnp.ndarray[cnp.float64_t, ndim=3] base_counts,
               long long repeats,
               long long t0_ns,
               long long plane_period_ns,
               cnp.ndarray[cnp.float64_t, ndim=2] theta_on_map,
               cnp.ndarray[cnp.float64_t, ndim=2] theta_off_map,
               double tau_ref_ns,
               double f_dark, double k_f, double f_max,
               double log_eps):
    """Threshold-crossing event generation; see pure.evs_events."""
    cdef Py_ssize_t n_base = base_counts.shape[0]
    cdef Py_ssize_t height = base_counts.shape[1]
    cdef Py_ssize_t width = base_counts.shape[2]
    cdef long long n_planes = n_base * repeats
    cdef double period = <double>plane_period_ns

    cdef EventBuf buf
    buf.cap = 4096
    buf.size = 0
    buf.t = <long long*>malloc(buf.cap * sizeof(long long))
    buf.x = <int*>malloc(buf.cap * sizeof(int))
    buf.y = <int*>malloc(buf.cap * sizeof(int))
    buf.p = <signed char*>malloc(buf.cap * sizeof(signed char))
    if buf.t == NULL or buf.x == NULL or buf.y == NULL or buf.p == NULL:
        raise MemoryError()

    cdef Py_ssize_t y, x
    cdef long long i
    cdef double theta_on, theta_off, lvl, l_ref, next_allowed
    cdef double intensity, target, fc, t_start, t_end, tau, thr, t_cross, t_event
    cdef int failed = 0
    with nogil:
        for y in range(height):
            if failed:
                break
            for x in range(width):
                theta_on = theta_on_map[y, x]
                theta_off = theta_off_map[y, x]
                lvl = log(base_counts[0, y, x] + log_eps)
                l_ref = lvl
                next_allowed = -INFINITY
                for i in range(n_planes):
                    intensity = base_counts[i % n_base, y, x]
                    target = log(intensity + log_eps)
                    fc = f_dark + k_f * intensity
                    if fc > f_max:
                        fc = f_max
                    t_start = <double>(t0_ns + i * plane_period_ns)
                    t_end = t_start + period
                    if isinf(fc):
                        # compare the reference (not the previous level) so
                        # refractory-deferred crossings still fire later
                        lvl = target
                        while l_ref + theta_on <= lvl:
                            t_event = t_start if t_start > next_allowed else next_allowed
                            if t_event >= t_end:
                                break
                            if _buf_push(&buf, <long long>floor(t_event + 0.5), <int>x, <int>y, 1) < 0:
                                failed = 1
                                break
                            l_ref += theta_on
                            next_allowed = t_event + tau_ref_ns
                        while l_ref - theta_off >= lvl:
                            t_event = t_start if t_start > next_allowed else next_allowed
                            if t_event >= t_end:
                                break
                            if _buf_push(&buf, <long long>floor(t_event + 0.5), <int>x, <int>y, -1) < 0:
                                failed = 1
                                break
                            l_ref -= theta_off
                            next_allowed = t_event + tau_ref_ns
                        if failed:
                            break
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
                                t_cross = t_start + tau * log((lvl - target) / (thr - target))
                            t_event = t_cross if t_cross > next_allowed else next_allowed
                            if t_event >= t_end:
                                break
                            if _buf_push(&buf, <long long>floor(t_event + 0.5), <int>x, <int>y, 1) < 0:
                                failed = 1
                                break
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
                                t_cross = t_start + tau * log((lvl - target) / (thr - target))
                            t_event = t_cross if t_cross > next_allowed else next_allowed
                            if t_event >= t_end:
                                break
                            if _buf_push(&buf, <long long>floor(t_event + 0.5), <int>x, <int>y, -1) < 0:
                                failed = 1
                                break
                            l_ref = thr
                            next_allowed = t_event + tau_ref_ns
                    if failed:
                        break
                    lvl = target + (lvl - target) * exp(-period / tau)

    if failed:
        free(buf.t); free(buf.x); free(buf.y); free(buf.p)
        raise MemoryError()

    t_np = np.empty(buf.size, dtype=np.int64)
    x_np = np.empty(buf.size, dtype=np.int32)
    y_np = np.empty(buf.size, dtype=np.int32)
    p_np = np.empty(buf.size, dtype=np.int8)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] t_arr = t_np
    cdef cnp.ndarray[cnp.int32_t, ndim=1] x_arr = x_np
    cdef cnp.ndarray[cnp.int32_t, ndim=1] y_arr = y_np
    cdef cnp.ndarray[cnp.int8_t, ndim=1] p_arr = p_np
    cdef Py_ssize_t j
    for j in range(buf.size):
        t_arr[j] = buf.t[j]
        x_arr[j] = buf.x[j]
        y_arr[j] = buf.y[j]
        p_arr[j] = buf.p[j]
    free(buf.t); free(buf.x); free(buf.y); free(buf.p)
    return t_np, x_np, y_np, p_np


def fifo_bus(cnp.ndarray[cnp.int64_t, ndim=1] t_gen, double drain_ns, long long depth):
    """Constant-rate FIFO with bounded wait; see pure.fifo_bus."""
    cdef Py_ssize_t n = t_gen.shape[0]
    t_out_np = np.zeros(n, dtype=np.int64)
    dropped_np = np.zeros(n, dtype=np.uint8)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] t_out = t_out_np
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] dropped = dropped_np
    cdef double cap = depth * drain_ns
    cdef double prev = -INFINITY
    cdef double t, cand
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            t = <double>t_gen[i]
            cand = prev + drain_ns
            if t > cand:
                cand = t
            if cand - t > cap:
                dropped[i] = 1
                continue
            t_out[i] = <long long>floor(cand + 0.5)
            prev = cand
    return t_out_np, dropped_np.view(np.bool_)
