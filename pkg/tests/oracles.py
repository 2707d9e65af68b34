"""Slow, obviously-correct reference implementations used by the tests."""

from fractions import Fraction
from itertools import product

from softsample.evaluation import Match


def iou_ref(a, b):
    """IoU by inclusion-exclusion with exact rationals."""
    a = [Fraction(v) for v in a]
    b = [Fraction(v) for v in b]
    iw = max(Fraction(0), min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(Fraction(0), min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if inter > 0 and union > 0 else Fraction(0)


def assign_ref(proposals, gts, fg=0.5):
    """(label, max_overlap, matched) per proposal; first index wins ties."""
    out = []
    for p in proposals:
        best, arg = Fraction(-1), None
        for j, (g, _) in enumerate(gts):
            v = iou_ref(p, g)
            if v > best:
                best, arg = v, j
        if arg is None:
            out.append((None, 0.0, None))
            continue
        label = gts[arg][1] if best >= Fraction(fg) else None
        out.append((label, float(best), arg))
    return out


def match_ref(dets, gts_by_image, iou_threshold=0.5):
    """Greedy VOC matching written out longhand.

    ``dets``: list of (image_id, box, score); ``gts_by_image``: image_id ->
    list of (box, difficult). Returns a Match per detection in input order.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][2], dets[i][0], i))
    used = {k: [False] * len(v) for k, v in gts_by_image.items()}
    result = [None] * len(dets)
    thr = Fraction(iou_threshold)
    for i in order:
        img, box, _ = dets[i]
        gts = gts_by_image.get(img, [])
        best, arg = Fraction(-1), None
        for j, (g, difficult) in enumerate(gts):
            if difficult or used[img][j]:
                continue
            v = iou_ref(box, g)
            if v > best:
                best, arg = v, j
        if arg is not None and best >= thr:
            used[img][arg] = True
            result[i] = Match.TP
        elif any(d and iou_ref(box, g) >= thr for g, d in gts):
            result[i] = Match.IGNORED
        else:
            result[i] = Match.FP
    return result


def ap_ref(flags, n_gt, mode):
    """AP from TP/FP flags (already ranked), computed with rationals."""
    tp = fp = 0
    rec, prec = [], []
    for f in flags:
        tp += f
        fp += not f
        rec.append(Fraction(tp, n_gt))
        prec.append(Fraction(tp, tp + fp))
    if mode == "eleven_point":
        total = Fraction(0)
        for i in range(11):
            cands = [p for r, p in zip(rec, prec) if r >= Fraction(i, 10)]
            total += max(cands) if cands else 0
        return total / 11
    # area under the upper envelope, one rectangle per recall step
    total, prev_r = Fraction(0), Fraction(0)
    for k, r in enumerate(rec):
        if r > prev_r:
            total += (r - prev_r) * max(prec[k:])
            prev_r = r
    return total


def best_f1_cutoff(scored_flags, n_gt):
    """Brute force over every candidate cutoff: returns (best F1, lowest
    cutoff achieving it). ``scored_flags``: (score, is_tp) pairs."""
    best, cut = Fraction(-1), None
    for c in sorted({s for s, _ in scored_flags}):
        tp = sum(1 for s, f in scored_flags if s >= c and f)
        n = sum(1 for s, _ in scored_flags if s >= c)
        f1 = Fraction(2 * tp, n + n_gt)
        if f1 > best:
            best, cut = f1, c
    return best, cut


def all_subsets(n):
    return product([False, True], repeat=n)


def match_enum(dets, gts, iou_threshold=0.5):
    """Enumerate every injective assignment of detections to (non-difficult)
    ground truths on one image and keep the ones consistent with the greedy
    rule; exactly one must survive. ``dets``: (box, score); ``gts``: boxes.
    Returns the TP flag per detection in input order."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    thr = Fraction(iou_threshold)
    ious = [[iou_ref(d[0], g) for g in gts] for d in dets]
    valid = []
    for assignment in product([None] + list(range(len(gts))), repeat=len(dets)):
        taken = [a for a in assignment if a is not None]
        if len(taken) != len(set(taken)):
            continue
        used, ok = set(), True
        for i in order:
            free = [j for j in range(len(gts)) if j not in used]
            best = max(free, key=lambda j: (ious[i][j], -j), default=None)
            want = best if best is not None and ious[i][best] >= thr else None
            if assignment[i] != want:
                ok = False
                break
            if want is not None:
                used.add(want)
        if ok:
            valid.append(assignment)
    assert len(valid) == 1, valid
    return [a is not None for a in valid[0]]


def iou_int(a, b):
    """Float IoU; exact comparison against 0.5-style thresholds as long as
    the coordinates are small integers (inter and union are then exact)."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def assign_fast(proposals, gts, fg=0.5):
    out = []
    for p in proposals:
        best, arg = -1.0, None
        for j, (g, _) in enumerate(gts):
            v = iou_int(p, g)
            if v > best:
                best, arg = v, j
        if arg is None:
            out.append((None, 0.0, None))
        else:
            out.append((gts[arg][1] if best >= fg else None, best, arg))
    return out


def match_fast(dets, gts, iou_threshold=0.5):
    """Single-image greedy matching; ``dets``: (box, score), ``gts``:
    (box, difficult). Returns a Match per detection in input order."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    used = [False] * len(gts)
    result = [None] * len(dets)
    for i in order:
        box = dets[i][0]
        best, arg = -1.0, None
        for j, (g, difficult) in enumerate(gts):
            if not difficult and not used[j]:
                v = iou_int(box, g)
                if v > best:
                    best, arg = v, j
        if arg is not None and best >= iou_threshold:
            used[arg] = True
            result[i] = Match.TP
        elif any(d and iou_int(box, g) >= iou_threshold for g, d in gts):
            result[i] = Match.IGNORED
        else:
            result[i] = Match.FP
    return result
