"""Independent reference computations used as test oracles.

Each function here is written from the definition with plain loops, never by
calling the package code it checks.
"""

import math

import numpy as np


def switch_points(x, phi1, phi2):
    out = []
    for t in range(1, len(x)):
        delta = abs(x[t] - x[t - 1])
        relative_ok = x[t] == 0 or delta / x[t] > phi2
        if delta > phi1 and relative_ok:
            out.append(t)
    return out


def is_steady(x, t, phi2, eps):
    return abs(x[t] - x[t - 1]) < phi2 * max(x[t], eps)


def square_wave(base, on, gaps, widths):
    """``gaps[0]`` base samples, then alternating ON pulses and gaps."""
    x = [base] * gaps[0]
    for w, g in zip(widths, gaps[1:]):
        x += [on] * w + [base] * g
    return np.array(x, dtype=float)


def central_diff(f, w, h=1e-6):
    w = np.array(w, dtype=float)
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def softmax_rows(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    for i, row in enumerate(z):
        e = [math.exp(v - max(row)) for v in row]
        s = sum(e)
        out[i] = [v / s for v in e]
    return out


def softmax_reg_hessian(w, x, num_classes):
    """Sum over instances of (diag(p) - p p^T) kron [x;1][x;1]^T, divided by N."""
    n, m = x.shape
    d = m + 1
    big = np.zeros((num_classes * d, num_classes * d))
    wm = np.asarray(w).reshape(num_classes, d)
    for i in range(n):
        xa = np.append(x[i], 1.0)
        p = softmax_rows((wm @ xa)[None, :])[0]
        a = np.diag(p) - np.outer(p, p)
        big += np.kron(a, np.outer(xa, xa))
    return big / n


def per_class_prf(y_true, y_pred, num_classes):
    """Precision/recall/F1 per class by counting instance by instance."""
    rows = []
    for c in range(num_classes):
        tp = fp = fn = 0
        for t, p in zip(y_true, y_pred):
            if p == c and t == c:
                tp += 1
            elif p == c:
                fp += 1
            elif t == c:
                fn += 1
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        rows.append((prec, rec, f1))
    return rows


def expand_confusion(counts):
    """Per-instance (true, predicted) lists reproducing a confusion matrix."""
    y_true, y_pred = [], []
    for t, row in enumerate(counts):
        for p, k in enumerate(row):
            y_true += [t] * int(k)
            y_pred += [p] * int(k)
    return y_true, y_pred


def kl_rows(y, q):
    total = 0.0
    for yi, qi in zip(y, q):
        total += sum(a * math.log(a / b) for a, b in zip(yi, qi))
    return total / len(y)


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))
