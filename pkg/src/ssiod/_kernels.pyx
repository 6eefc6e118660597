# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled box kernels: pairwise IoU, greedy class-aware NMS, greedy GT matching.

Signatures and results are identical to :mod:`ssiod._kernels_py`.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline double _iou(double ax1, double ay1, double ax2, double ay2,
                        double bx1, double by1, double bx2, double by2) nogil:
    cdef double iw = (ax2 if ax2 < bx2 else bx2) - (ax1 if ax1 > bx1 else bx1)
    cdef double ih = (ay2 if ay2 < by2 else by2) - (ay1 if ay1 > by1 else by1)
    cdef double inter, union
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                o[i, j] = _iou(a[i, 0], a[i, 1], a[i, 2], a[i, 3],
                               b[j, 0], b[j, 1], b[j, 2], b[j, 3])
    return out


def nms_keep(const double[:, ::1] boxes, const double[::1] scores,
             const cnp.int64_t[::1] classes, double threshold):
    cdef Py_ssize_t n = boxes.shape[0], i, j, ii, jj, nkeep = 0
    order_arr = np.argsort(-np.asarray(scores), kind="stable").astype(np.intp)
    cdef Py_ssize_t[::1] order = order_arr
    suppressed_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] suppressed = suppressed_arr
    keep_arr = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] keep = keep_arr
    with nogil:
        for i in range(n):
            ii = order[i]
            if suppressed[ii]:
                continue
            keep[nkeep] = ii
            nkeep += 1
            for j in range(i + 1, n):
                jj = order[j]
                if suppressed[jj] or classes[jj] != classes[ii]:
                    continue
                if _iou(boxes[ii, 0], boxes[ii, 1], boxes[ii, 2], boxes[ii, 3],
                        boxes[jj, 0], boxes[jj, 1], boxes[jj, 2], boxes[jj, 3]) > threshold:
                    suppressed[jj] = 1
    return keep_arr[:nkeep].copy()


def greedy_match(const double[:, ::1] ious, const unsigned char[::1] gt_ignore,
                 double threshold):
    # rows are detections already in processing order
    cdef Py_ssize_t nd = ious.shape[0], ng = ious.shape[1], d, g, best
    cdef double best_iou, v
    cdef int pass_
    match_arr = np.full(nd, -1, dtype=np.intp)
    cdef Py_ssize_t[::1] match = match_arr
    used_arr = np.zeros(ng, dtype=np.uint8)
    cdef unsigned char[::1] used = used_arr
    with nogil:
        for d in range(nd):
            best = -1
            for pass_ in range(2):
                best_iou = -1.0
                for g in range(ng):
                    if used[g] or gt_ignore[g] != pass_:
                        continue
                    v = ious[d, g]
                    if v >= threshold and v > best_iou:
                        best_iou = v
                        best = g
                if best >= 0:
                    break
            if best >= 0:
                used[best] = 1
                match[d] = best
    return match_arr
