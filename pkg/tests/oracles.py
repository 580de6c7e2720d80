"""Independent reference implementations used as test oracles.

Nothing here imports the code under test beyond plain data types, so a bug
in the library cannot leak into its own oracle.
"""
import numpy as np


def naive_conv2d(x, w, b, padding, stride):
    """Direct seven-loop convolution (cross-correlation), zero padding."""
    n, c, h, wd = x.shape
    d, _, kh, kw = w.shape
    ph, pw = padding
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (wd + 2 * pw - kw) // stride + 1
    out = np.zeros((n, d, ho, wo))
    for bi in range(n):
        for o in range(d):
            for y in range(ho):
                for xo in range(wo):
                    acc = b[o]
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                yy = y * stride + i - ph
                                xx = xo * stride + j - pw
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += w[o, ci, i, j] * x[bi, ci, yy, xx]
                    out[bi, o, y, xo] = acc
    return out


def numeric_grad(f, arr, h=1e-6, index=None):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place).

    With ``index`` (an iterable of flat indices) only those entries are
    probed; the result is then a 1-d array in the same order.
    """
    flat = arr.reshape(-1)
    idx = range(flat.size) if index is None else list(index)
    out = np.zeros(len(idx))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2 * h)
    return out.reshape(arr.shape) if index is None else out


def rel_error(analytic, numeric, zero_tol=1e-8):
    """Norm-wise relative error ``||a - n|| / max(||a||, ||n||)``.

    A norm-wise ratio is used instead of an element-wise one because single
    entries of a gradient can be near zero, where an element-wise ratio only
    measures finite-difference round-off. When both norms are below
    ``zero_tol`` (the round-off level of a central difference with h = 1e-6)
    the gradient is zero to within what the oracle can resolve and 0.0 is
    returned; this happens for biases feeding a batch norm, whose true
    gradient is exactly zero.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < zero_tol:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def brute_force_counts(pred, gt, num_classes):
    """Per-class (correct, gt_count, pred_count, union) by visiting every pixel."""
    correct = [0] * num_classes
    gt_count = [0] * num_classes
    pred_count = [0] * num_classes
    for p, g in zip(np.asarray(pred).ravel().tolist(), np.asarray(gt).ravel().tolist()):
        gt_count[g] += 1
        pred_count[p] += 1
        if p == g:
            correct[p] += 1
    union = [gt_count[i] + pred_count[i] - correct[i] for i in range(num_classes)]
    return correct, gt_count, pred_count, union


def brute_force_metrics(pred, gt, num_classes):
    correct, gt_count, _, union = brute_force_counts(pred, gt, num_classes)
    class_acc = [None if gt_count[i] == 0 else correct[i] / gt_count[i] for i in range(num_classes)]
    overall = sum(correct) / sum(gt_count)
    ious = [correct[i] / union[i] for i in range(num_classes) if union[i] > 0]
    miou = sum(ious) / len(ious) if ious else None
    return class_acc, overall, miou
