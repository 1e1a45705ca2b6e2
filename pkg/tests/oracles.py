"""Independent reference implementations used as test oracles."""

import functools


def oracle_iou(a, b):
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    if ix2 - ix1 <= 0 or iy2 - iy1 <= 0:
        return 0.0
    inter = (ix2 - ix1) * (iy2 - iy1)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def oracle_nms(boxes, threshold):
    """Exhaustive reference: full pairwise IoU table, then one pass in priority order."""
    n = len(boxes)
    table = [[oracle_iou(boxes[i], boxes[j]) for j in range(n)] for i in range(n)]

    def before(i, j):
        a, b = boxes[i], boxes[j]
        if a[4] != b[4]:
            return -1 if a[4] > b[4] else 1
        if a[0] != b[0]:
            return -1 if a[0] < b[0] else 1
        if a[1] != b[1]:
            return -1 if a[1] < b[1] else 1
        return -1 if i < j else (1 if i > j else 0)

    order = sorted(range(n), key=functools.cmp_to_key(before))
    kept = []
    for i in order:
        if all(table[k][i] <= threshold for k in kept):
            kept.append(i)
    return kept


def naive_confusion(pairs):
    """Count (predicted, actual) pairs one condition at a time."""
    tp = fp = fn = tn = 0
    for pred, actual in pairs:
        if pred and actual:
            tp += 1
        if pred and not actual:
            fp += 1
        if not pred and actual:
            fn += 1
        if not pred and not actual:
            tn += 1
    return tp, fp, fn, tn
