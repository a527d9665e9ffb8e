"""Independent brute-force references used by the unit and acceptance tests.

Each oracle is written from the textbook definition with plain loops or
exact rational arithmetic and shares no code with the package.
"""

from __future__ import annotations

import math
import struct
from fractions import Fraction

import numpy as np


def conv2d_direct(x, kernel, bias, stride=1, dilation=1, padding=(0, 0, 0, 0)):
    """out[n,o,k,l] = b[o] + sum_{c,i,j} x[n,c,k*s+i*d-pt, l*s+j*d-pl] * w[o,c,i,j], zero outside."""
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    pt, pb, pl, pr = padding
    ho = (h + pt + pb - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + pl + pr - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for b in range(n):
        for oc in range(o):
            for k in range(ho):
                for l in range(wo):
                    acc = float(bias[oc])
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                r = k * stride + i * dilation - pt
                                q = l * stride + j * dilation - pl
                                if 0 <= r < h and 0 <= q < w:
                                    acc += float(x[b, ic, r, q]) * float(kernel[oc, ic, i, j])
                    out[b, oc, k, l] = acc
    return out


def pool_scan(x, window, stride, mode):
    """Per-window scan; max keeps the first maximum in row-major order."""
    n, c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    vals = np.zeros((n, c, ho, wo))
    idx = np.zeros((n, c, ho, wo), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for k in range(ho):
                for l in range(wo):
                    best, best_i, total = -math.inf, -1, 0.0
                    for i in range(window):
                        for j in range(window):
                            r, q = k * stride + i, l * stride + j
                            v = float(x[b, ch, r, q])
                            total += v
                            if v > best:
                                best, best_i = v, r * w + q
                    if mode == "max":
                        vals[b, ch, k, l], idx[b, ch, k, l] = best, best_i
                    else:
                        vals[b, ch, k, l] = total / window**2
    return vals, idx


def matmul_loops(a, b):
    n, d = a.shape
    k = b.shape[1]
    out = np.zeros((n, k))
    for i in range(n):
        for j in range(k):
            out[i, j] = sum(float(a[i, t]) * float(b[t, j]) for t in range(d))
    return out


def detection_exact(tp, fp, tn, fn):
    """Metrics in exact rational arithmetic; None where a denominator is zero."""

    def ratio(a, b):
        return None if b == 0 else Fraction(a, b)

    p, r = ratio(tp, tp + fp), ratio(tp, tp + fn)
    f = None if p is None or r is None or p + r == 0 else 2 * p * r / (p + r)
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = None if den == 0 else (tp * tn - fp * fn) / math.sqrt(den)
    pct = lambda v: None if v is None else float(100 * v)  # noqa: E731
    return {
        "accuracy": pct(ratio(tp + tn, tp + fp + tn + fn)),
        "precision": pct(p),
        "recall": pct(r),
        "specificity": pct(ratio(tn, tn + fp)),
        "f_score": pct(f),
        "mcc": mcc,
    }


def rank_pair_auc(scores, labels):
    """Fraction of (positive, negative) pairs ordered correctly; ties count one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y != 1]
    total = Fraction(0)
    for p in pos:
        for q in neg:
            total += 1 if p > q else Fraction(1, 2) if p == q else 0
    return total / (len(pos) * len(neg))


def pixel_counts(pred, gt, c):
    tp = fp = fn = 0
    for a, b in zip(np.ravel(pred), np.ravel(gt)):
        tp += a == c and b == c
        fp += a == c and b != c
        fn += a != c and b == c
    return tp, fp, fn


def cross_entropy_direct(probs, targets, weights=None):
    n, c = probs.shape[:2]
    flat_p = np.moveaxis(probs, 1, -1).reshape(-1, c)
    flat_t = np.ravel(targets)
    w = np.ones(c) if weights is None else weights
    return sum(-w[t] * math.log(max(p[t], 1e-12)) for p, t in zip(flat_p, flat_t)) / len(flat_t)


def hand_nifti(endian="<", magic=b"n+1\0", values=(0, 100, 200, 300), truncate=0, datatype=4):
    """348-byte header plus 4-byte extension flag and an int16 2x2x1 body, packed field by field."""
    hdr = bytearray(348)
    struct.pack_into(endian + "i", hdr, 0, 348)  # sizeof_hdr
    struct.pack_into(endian + "8h", hdr, 40, 3, 2, 2, 1, 1, 1, 1, 1)  # dim
    struct.pack_into(endian + "h", hdr, 70, datatype)
    struct.pack_into(endian + "h", hdr, 72, 16)  # bitpix
    struct.pack_into(endian + "8f", hdr, 76, 1.0, 0.8, 0.8, 2.5, 1, 1, 1, 1)  # pixdim
    struct.pack_into(endian + "f", hdr, 108, 352.0)  # vox_offset
    hdr[344:348] = magic
    body = struct.pack(endian + "4h", *values)
    raw = bytes(hdr) + b"\0\0\0\0" + body
    return raw[: len(raw) - truncate] if truncate else raw
