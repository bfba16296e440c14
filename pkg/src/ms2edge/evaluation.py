"""Edge-map post-processing and benchmark metrics.

Protocols: "C" evaluates the raw thresholded prediction, "S" applies
non-maximum suppression once and thins every thresholded map. Predicted
and ground-truth edge pixels are matched one-to-one within a radius of
tol x image diagonal. The default matcher finds a maximum-cardinality
matching (Hopcroft-Karp); a greedy shortest-offset-first matcher is kept
for comparison and is exact whenever the radius is below one pixel.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.csgraph import maximum_bipartite_matching

from .data import IGNORE

THRESHOLDS = np.linspace(0.01, 0.99, 99)


def _plane(x):
    x = np.asarray(x)
    if x.ndim == 3 and x.shape[0] == 1:
        return x[0], True
    if x.ndim != 2:
        raise ValueError(f"expected an [H,W] or [1,H,W] map, got {x.shape}")
    return x, False


def _interp(img, ys, xs):
    return ndimage.map_coordinates(img, [ys, xs], order=1, mode="nearest")


def nms(edge_map, sigma=1.0):
    """Keep pixels that are maxima along the edge normal; others become 0.

    The normal comes from the Hessian of the Gaussian-smoothed map: it is
    the direction of strongest curvature, perpendicular to the principal
    axis at 0.5 * atan2(2 Hxy, Hxx - Hyy). The two neighbours one pixel away
    along the normal are bilinearly interpolated (edge values replicated).
    A pixel survives when E >= both neighbours and E > at least one, so
    flat plateaus are removed.
    """
    e, lead = _plane(edge_map)
    e = e.astype(np.float64)
    s = ndimage.gaussian_filter(e, sigma, mode="nearest") if sigma > 0 else e
    gy, gx = np.gradient(s)
    hyy, hyx = np.gradient(gy)
    hxy, hxx = np.gradient(gx)
    theta = 0.5 * np.arctan2(hxy + hyx, hxx - hyy) + np.pi / 2
    # rounding drops the 1e-17 residue of cos(pi/2), which would otherwise
    # tilt axis-aligned normals and split ties between equal neighbours
    dy, dx = np.round(np.sin(theta), 12), np.round(np.cos(theta), 12)
    yy, xx = np.mgrid[0:e.shape[0], 0:e.shape[1]].astype(np.float64)
    n1 = _interp(e, (yy + dy).ravel(), (xx + dx).ravel()).reshape(e.shape)
    n2 = _interp(e, (yy - dy).ravel(), (xx - dx).ravel()).reshape(e.shape)
    keep = (e >= np.maximum(n1, n2)) & (e > np.minimum(n1, n2))
    out = np.where(keep, e, 0.0).astype(np.asarray(edge_map).dtype if np.asarray(edge_map).dtype.kind == "f"
                                        else np.float32)
    return out[None] if lead else out


# thinning ----------------------------------------------------------------------

# neighbour bit order: x1 = E, x2 = NE, x3 = N, x4 = NW, x5 = W, x6 = SW, x7 = S, x8 = SE
_KERNEL = np.array([[8, 4, 2], [16, 0, 1], [32, 64, 128]])


def _thin_luts():
    lut1 = np.zeros(256, bool)
    lut2 = np.zeros(256, bool)
    for code in range(256):
        x = [(code >> i) & 1 for i in range(8)] + [code & 1]       # x[0..7] = x1..x8, x[8] = x1
        xh = sum(1 for i in range(4) if not x[2 * i] and (x[2 * i + 1] or x[2 * i + 2]))
        n1 = sum(x[2 * k] | x[2 * k + 1] for k in range(4))
        n2 = sum(x[2 * k + 1] | x[2 * k + 2] for k in range(4))
        g12 = xh == 1 and 2 <= min(n1, n2) <= 3
        x1, x2, x3, x4, x5, x6, x7, x8 = x[:8]
        lut1[code] = g12 and ((x2 or x3 or not x8) and x1) == 0
        lut2[code] = g12 and ((x6 or x7 or not x4) and x5) == 0
    return lut1, lut2


_LUT1, _LUT2 = _thin_luts()


def thin(binary_map, max_iter=None):
    """Two-subiteration parallel thinning to an 8-connected skeleton, run to convergence."""
    b, lead = _plane(binary_map)
    img = np.asarray(b).astype(bool).astype(np.uint8)
    it = 0
    while max_iter is None or it < max_iter:
        before = int(img.sum())
        for lut in (_LUT1, _LUT2):
            code = ndimage.correlate(img, _KERNEL, mode="constant")
            img[lut[code] & (img == 1)] = 0
        it += 1
        if img.sum() == before:
            break
    out = img.astype(bool)
    return out[None] if lead else out


# matching ----------------------------------------------------------------------

@dataclass
class MatchResult:
    threshold: float
    tp: int
    fp: int
    fn: int
    precision: float = field(init=False)
    recall: float = field(init=False)
    f: float = field(init=False)

    def __post_init__(self):
        self.precision, self.recall, self.f = prf(self.tp, self.tp + self.fp, self.tp, self.tp + self.fn)


def prf(tp_pred, n_pred, tp_gt, n_gt):
    """Precision, recall and F with 0/0 read as 0."""
    p = tp_pred / n_pred if n_pred else 0.0
    r = tp_gt / n_gt if n_gt else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def match_radius(shape, tol):
    return tol * float(np.hypot(*shape))


def _offsets(radius):
    k = int(np.floor(radius))
    dy, dx = np.mgrid[-k:k + 1, -k:k + 1]
    d2 = dy ** 2 + dx ** 2
    sel = d2 <= radius ** 2 + 1e-9
    dy, dx, d2 = dy[sel], dx[sel], d2[sel]
    order = np.lexsort((dx, dy, d2))
    return list(zip(dy[order], dx[order]))


def _shift(a, dy, dx):
    """out[y, x] = a[y + dy, x + dx], zero outside."""
    h, w = a.shape
    out = np.zeros_like(a)
    ys, yd = (slice(dy, h), slice(0, h - dy)) if dy >= 0 else (slice(0, h + dy), slice(-dy, h))
    xs, xd = (slice(dx, w), slice(0, w - dx)) if dx >= 0 else (slice(0, w + dx), slice(-dx, w))
    out[yd, xd] = a[ys, xs]
    return out


def match_count(pred, gt, radius, method="optimal"):
    """Number of one-to-one pred/GT pairs with distance <= radius."""
    if method == "greedy":
        return _greedy_count(pred, gt, radius)
    if method != "optimal":
        raise ValueError(f"method must be 'optimal' or 'greedy', got {method!r}")
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if radius < 1:
        return int((pred & gt).sum())
    h, w = gt.shape
    gid = np.full(gt.shape, -1, np.int64)
    gid[gt] = np.arange(int(gt.sum()))
    py, px = np.nonzero(pred)
    if not len(py) or not gt.any():
        return 0
    rows, cols = [], []
    for dy, dx in _offsets(radius):
        yy, xx = py + dy, px + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        j = np.full(len(py), -1, np.int64)
        j[ok] = gid[yy[ok], xx[ok]]
        hit = j >= 0
        rows.append(np.nonzero(hit)[0])
        cols.append(j[hit])
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    if not len(rows):
        return 0
    graph = sparse.csr_matrix((np.ones(len(rows), np.int8), (rows, cols)), shape=(len(py), int(gt.sum())))
    return int((maximum_bipartite_matching(graph, perm_type="column") >= 0).sum())


def _greedy_count(pred, gt, radius):
    """Pairs matched one-to-one with distance <= radius, shortest offsets first."""
    free_p = np.asarray(pred, bool).copy()
    free_g = np.asarray(gt, bool).copy()
    n = 0
    for dy, dx in _offsets(radius):
        hit = free_p & _shift(free_g, dy, dx)
        if not hit.any():
            continue
        n += int(hit.sum())
        free_p &= ~hit
        free_g &= ~_shift(hit, -dy, -dx)
    return n


def _valid_mask(gt):
    g, _ = _plane(gt)
    return g != IGNORE, g == 1


def match_edges(pred_binary, gt_binary, tol_fraction=0.0075, threshold=float("nan"), method="optimal") -> MatchResult:
    p, _ = _plane(pred_binary)
    valid, g = _valid_mask(gt_binary)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    p = np.asarray(p, bool) & valid
    tp = match_count(p, g, match_radius(g.shape, tol_fraction), method)
    return MatchResult(threshold, tp, int(p.sum()) - tp, int(g.sum()) - tp)


# dataset metrics ---------------------------------------------------------------

@dataclass
class EvalResult:
    ods: float
    ois: float
    ap: float
    ods_threshold: float
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f: np.ndarray
    per_image_f: np.ndarray
    protocol: str = "C"

    def summary(self):
        return (f"protocol={self.protocol} ODS={self.ods:.4f} (t={self.ods_threshold:.2f}) "
                f"OIS={self.ois:.4f} AP={self.ap:.4f}")


def image_counts(pred, gt, protocol="C", tol=0.0075, thresholds=THRESHOLDS, sigma=1.0, method="optimal"):
    """[n_thresholds, 4] counts (matched pred, pred, matched gt, gt) for one image."""
    p, _ = _plane(pred)
    valid, g = _valid_mask(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    if protocol not in ("C", "S"):
        raise ValueError(f"protocol must be 'C' or 'S', got {protocol!r}")
    src = nms(p, sigma) if protocol == "S" else p
    radius = match_radius(g.shape, tol)
    ng = int(g.sum())
    out = np.zeros((len(thresholds), 4), np.int64)
    for i, t in enumerate(thresholds):
        b = src >= t
        if protocol == "S":
            b = thin(b)
        b &= valid
        m = match_count(b, g, radius, method)
        out[i] = (m, int(b.sum()), m, ng)
    return out


def _f_rows(c):
    rows = [prf(*r) for r in c]
    return np.array(rows).reshape(-1, 3)


def average_precision(precision, recall):
    """Trapezoid area under P(R), with the curve extended flat to recall 0."""
    r, p = np.asarray(recall, float), np.asarray(precision, float)
    order = np.argsort(r, kind="stable")
    r, p = r[order], p[order]
    r = np.concatenate([[0.0], r])
    p = np.concatenate([[p[0]], p])
    return float(np.sum((r[1:] - r[:-1]) * (p[1:] + p[:-1]) / 2))


def ods_ois_ap(preds, gts, protocol="C", tol=0.0075, thresholds=THRESHOLDS, sigma=1.0,
               method="optimal") -> EvalResult:
    preds, gts = list(preds), list(gts)
    if not preds or len(preds) != len(gts):
        raise ValueError("need at least one prediction and one ground truth per prediction")
    thresholds = np.asarray(thresholds, float)
    counts = np.stack([image_counts(p, g, protocol, tol, thresholds, sigma, method) for p, g in zip(preds, gts)])
    agg = _f_rows(counts.sum(axis=0))
    best = int(np.argmax(agg[:, 2]))
    per_image = np.array([_f_rows(c)[:, 2].max() for c in counts])
    return EvalResult(float(agg[best, 2]), float(per_image.mean()), average_precision(agg[:, 0], agg[:, 1]),
                      float(thresholds[best]), thresholds, agg[:, 0], agg[:, 1], agg[:, 2], per_image, protocol)


def average_crispness(pred_map, sigma=1.0):
    """Mass kept by non-maximum suppression: sum(nms(p)) / sum(p)."""
    p = np.asarray(pred_map, np.float64)
    total = float(p.sum())
    if total == 0:
        warnings.warn("average crispness of an all-zero map is undefined; returning NaN")
        return float("nan")
    return float(nms(p, sigma).sum() / total)


def dataset_crispness(pred_maps, sigma=1.0):
    """Mean per-image crispness, skipping undefined (all-zero) maps."""
    vals = [average_crispness(p, sigma) for p in pred_maps]
    vals = [v for v in vals if np.isfinite(v)]
    return float(np.mean(vals)) if vals else float("nan")


def write_pr_table(path, res: EvalResult):
    with open(path, "w", encoding="utf-8") as f:
        f.write("threshold\trecall\tprecision\tf\n")
        for t, r, p, fv in zip(res.thresholds, res.recall, res.precision, res.f):
            f.write(f"{t:.2f}\t{r:.6f}\t{p:.6f}\t{fv:.6f}\n")
