"""Pure-Python reference versions of the compiled box kernels.

Used when the extension is not built, or when ``SSIOD_PURE_PYTHON=1``.
"""
import numpy as np


def _iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((len(a), len(b)), dtype=np.float64)
    for i, ra in enumerate(a.tolist()):
        for j, rb in enumerate(b.tolist()):
            out[i, j] = _iou(ra, rb)
    return out


def nms_keep(boxes, scores, classes, threshold):
    boxes = np.asarray(boxes, dtype=np.float64).tolist()
    classes = np.asarray(classes).tolist()
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable").tolist()
    suppressed = [False] * len(order)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        for j in order[pos + 1 :]:
            if suppressed[j] or classes[j] != classes[i]:
                continue
            if _iou(boxes[i], boxes[j]) > threshold:
                suppressed[j] = True
    return np.asarray(keep, dtype=np.intp)


def greedy_match(ious, gt_ignore, threshold):
    ious = np.asarray(ious, dtype=np.float64)
    ignore = np.asarray(gt_ignore, dtype=np.uint8).tolist()
    nd, ng = ious.shape
    match = np.full(nd, -1, dtype=np.intp)
    used = [False] * ng
    rows = ious.tolist()
    for d in range(nd):
        best = -1
        # non-ignored ground truth first, ignored only as a fallback
        for flag in (0, 1):
            best_iou = -1.0
            for g in range(ng):
                if used[g] or ignore[g] != flag:
                    continue
                v = rows[d][g]
                if v >= threshold and v > best_iou:
                    best_iou, best = v, g
            if best >= 0:
                break
        if best >= 0:
            used[best] = True
            match[d] = best
    return match
