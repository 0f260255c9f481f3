"""Slow scalar-loop reference implementations used only by the tests."""

import math

import numpy as np


def conv2d_direct(x, w, b):
    n_, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = (k - 1) // 2
    out = np.zeros((n_, cout, h, wd))
    for n in range(n_):
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    s = b[o]
                    for c in range(cin):
                        for a in range(k):
                            ii = i + a - p
                            if not 0 <= ii < h:
                                continue
                            for bb in range(k):
                                jj = j + bb - p
                                if 0 <= jj < wd:
                                    s += x[n, c, ii, jj] * w[o, c, a, bb]
                    out[n, o, i, j] = s
    return out


def avg_pool_loop(x):
    n_, c_, h, w = x.shape
    out = np.zeros((n_, c_))
    for n in range(n_):
        for c in range(c_):
            s = 0.0
            for i in range(h):
                for j in range(w):
                    s += x[n, c, i, j]
            out[n, c] = s / (h * w)
    return out


def fc_loop(x, w, b):
    out = np.zeros((x.shape[0], w.shape[0]))
    for n in range(x.shape[0]):
        for o in range(w.shape[0]):
            out[n, o] = b[o] + sum(x[n, i] * w[o, i] for i in range(x.shape[1]))
    return out


def masked_errors(pred, gt, mask):
    errs = []
    for p, g, m in zip(np.ravel(pred), np.ravel(gt), np.ravel(mask)):
        if m:
            errs.append(float(p) - float(g))
    return errs


def l1_loop(pred, gt, mask):
    e = masked_errors(pred, gt, mask)
    return sum(abs(v) for v in e) / len(e)


def rmse_loop(pred, gt, mask):
    e = masked_errors(pred, gt, mask)
    return math.sqrt(sum(v * v for v in e) / len(e))


def ame_loop(pred, gt, mask):
    e = masked_errors(pred, gt, mask)
    return abs(sum(e) / len(e))


def ce_loop(logits, labels, mask):
    total, count = 0.0, 0
    n_, _, h, w = logits.shape
    for n in range(n_):
        for i in range(h):
            for j in range(w):
                if not mask[n, i, j]:
                    continue
                a, b = logits[n, 0, i, j], logits[n, 1, i, j]
                m = max(a, b)
                lse = m + math.log(math.exp(a - m) + math.exp(b - m))
                true = b if labels[n, i, j] > 0.5 else a
                total += lse - true
                count += 1
    return total / count


def accuracy_loop(pred, gt, mask):
    hit = n = 0
    for p, g, m in zip(np.ravel(pred), np.ravel(gt), np.ravel(mask)):
        if m:
            n += 1
            hit += (p > 0.5) == (g > 0.5)
    return hit / n
