"""Independent reference implementations used by several test modules."""


def brute_force_eer(pos, neg):
    """Slow reference: rates at every midpoint threshold, crossing interpolated."""
    cuts = sorted(set(pos) | set(neg))
    thresholds = [cuts[0] - 1.0] + [(a + b) / 2 for a, b in zip(cuts, cuts[1:])] + [cuts[-1] + 1.0]
    points = []
    for th in thresholds:
        fpr = sum(1 for s in neg if s > th) / len(neg)
        fnr = sum(1 for s in pos if s < th) / len(pos)
        points.append((fpr, fnr))
    for (f0, n0), (f1, n1) in zip(points, points[1:]):
        d0, d1 = f0 - n0, f1 - n1
        if d0 == 0:
            return f0
        if d0 > 0 > d1:
            t = d0 / (d0 - d1)
            return f0 + t * (f1 - f0)
        if d1 == 0:
            return f1
    raise AssertionError("no crossing")
