# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled loop kernels. Signatures mirror ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, isfinite

cnp.import_array()


def paint_boxes(const double[:, ::1] edges, const long long[::1] labels, int size, int background):
    cdef Py_ssize_t n = edges.shape[0]
    out_arr = np.full((size, size), background, dtype=np.int32)
    cdef int[:, ::1] out = out_arr
    cdef Py_ssize_t k, r, c
    cdef int r0, r1, c0, c1
    cdef double left, top, right, bottom, cx, cy
    for k in range(n):
        left = edges[k, 0]
        top = edges[k, 1]
        right = edges[k, 2]
        bottom = edges[k, 3]
        if right <= left or bottom <= top:
            continue
        # candidate index window, refined by the exact center test below
        r0 = <int>(top * size - 1.0)
        r1 = <int>(bottom * size + 1.0)
        c0 = <int>(left * size - 1.0)
        c1 = <int>(right * size + 1.0)
        if r0 < 0:
            r0 = 0
        if c0 < 0:
            c0 = 0
        if r1 > size - 1:
            r1 = size - 1
        if c1 > size - 1:
            c1 = size - 1
        for r in range(r0, r1 + 1):
            cy = (r + 0.5) / size
            if cy < top or cy >= bottom:
                continue
            for c in range(c0, c1 + 1):
                cx = (c + 0.5) / size
                if cx >= left and cx < right:
                    out[r, c] = <int>labels[k]
    return out_arr


def grid_iou(const double[::1] a, const double[::1] b, int resolution):
    cdef double x0 = min(a[0], b[0])
    cdef double y0 = min(a[1], b[1])
    cdef double x1 = max(a[2], b[2])
    cdef double y1 = max(a[3], b[3])
    cdef double sx = (x1 - x0) / resolution
    cdef double sy = (y1 - y0) / resolution
    cdef Py_ssize_t r, c
    cdef double cx, cy
    cdef bint ina, inb
    cdef long long n_a = 0, n_b = 0, n_ab = 0, inter = 0, union = 0
    if sx <= 0.0 or sy <= 0.0:
        return 0.0
    # the column test does not depend on the row, so count covered columns once
    for c in range(resolution):
        cx = x0 + (c + 0.5) * sx
        ina = cx >= a[0] and cx < a[2]
        inb = cx >= b[0] and cx < b[2]
        n_a += ina
        n_b += inb
        n_ab += ina and inb
    for r in range(resolution):
        cy = y0 + (r + 0.5) * sy
        ina = cy >= a[1] and cy < a[3]
        inb = cy >= b[1] and cy < b[3]
        if ina and inb:
            inter += n_ab
            union += n_a + n_b - n_ab
        elif ina:
            union += n_a
        elif inb:
            union += n_b
    if union == 0:
        return 0.0
    return <double>inter / <double>union


def target_ranks(const double[:, ::1] scores, const long long[::1] targets):
    cdef Py_ssize_t n = scores.shape[0]
    cdef Py_ssize_t v = scores.shape[1]
    out_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef Py_ssize_t i, k
    cdef long long t, rank
    cdef double st
    for i in range(n):
        t = targets[i]
        st = scores[i, t]
        rank = 1
        for k in range(v):
            if k != t and scores[i, k] >= st:
                rank += 1
        out[i] = rank
    return out_arr


def pairwise_disparities(const double[:, ::1] boxes, bint log_quotient):
    cdef Py_ssize_t n = boxes.shape[0]
    d_arr = np.zeros((n, n, 4), dtype=np.float64)
    valid_arr = np.ones((n, n), dtype=np.uint8)
    cdef double[:, :, ::1] d = d_arr
    cdef unsigned char[:, ::1] valid = valid_arr
    logs_arr = np.zeros((n, 2), dtype=np.float64)
    pos_arr = np.zeros(n, dtype=np.uint8)
    cdef double[:, ::1] logs = logs_arr
    cdef unsigned char[::1] pos = pos_arr
    cdef Py_ssize_t i, j
    cdef double q
    for i in range(n):
        if boxes[i, 2] > 0.0 and boxes[i, 3] > 0.0:
            pos[i] = 1
            logs[i, 0] = log(boxes[i, 2])
            logs[i, 1] = log(boxes[i, 3])
    for i in range(n):
        for j in range(n):
            d[i, j, 0] = boxes[i, 0] - boxes[j, 0]
            d[i, j, 1] = boxes[i, 1] - boxes[j, 1]
            if not (pos[i] and pos[j]):
                valid[i, j] = 0
                continue
            d[i, j, 2] = logs[i, 0] - logs[j, 0]
            if log_quotient:
                q = logs[i, 1] / logs[j, 1]
                if not isfinite(q):
                    valid[i, j] = 0
                    q = 0.0
                d[i, j, 3] = q
            else:
                d[i, j, 3] = logs[i, 1] - logs[j, 1]
    return d_arr, valid_arr
