"""Literal per-element reference implementations used as test oracles."""

import math

import numpy as np


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def pointwise(x, w, b):
    """x (C, F, T), w (O, C) -> (O, F, T) via explicit loops over channels."""
    c_in, f, t = x.shape
    out = np.zeros((w.shape[0], f, t))
    for o in range(w.shape[0]):
        acc = np.full((f, t), float(b[o]))
        for c in range(c_in):
            acc = acc + w[o, c] * x[c]
        out[o] = acc
    return out


def gtfa(x, vf_w, vf_b, vt_w, vt_b):
    """x (B, C, F, T)."""
    bsz, c, f, t = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    fmaps = np.zeros((bsz, c, 1, t))
    tmaps = np.zeros((bsz, c, f, 1))
    for b in range(bsz):
        pf = np.zeros((c, 1, t))
        for ch in range(c):
            for n in range(t):
                pf[ch, 0, n] = sum(x[b, ch, i, n] for i in range(f)) / f
        pt = np.zeros((c, f, 1))
        for ch in range(c):
            for i in range(f):
                pt[ch, i, 0] = sum(x[b, ch, i, n] for n in range(t)) / t
        zf, zt = pointwise(pf, vf_w, vf_b), pointwise(pt, vt_w, vt_b)
        for ch in range(c):
            for n in range(t):
                fmaps[b, ch, 0, n] = sigmoid(zf[ch, 0, n])
            for i in range(f):
                tmaps[b, ch, i, 0] = sigmoid(zt[ch, i, 0])
        for ch in range(c):
            for i in range(f):
                for n in range(t):
                    out[b, ch, i, n] = x[b, ch, i, n] * fmaps[b, ch, 0, n] * tmaps[b, ch, i, 0]
    return out, fmaps, tmaps


def depthwise(x, w, bias, axis):
    """x (C, F, T); w (C, k) along ``axis`` (0 = frequency, 1 = time), zero 'same' padding."""
    c, f, t = x.shape
    k = w.shape[1]
    p = (k - 1) // 2
    out = np.zeros((c, f, t))
    for ch in range(c):
        for i in range(f):
            for n in range(t):
                acc = float(bias[ch])
                for j in range(k):
                    if axis == 0:
                        ii = i + j - p
                        if 0 <= ii < f:
                            acc += w[ch, j] * x[ch, ii, n]
                    else:
                        nn = n + j - p
                        if 0 <= nn < t:
                            acc += w[ch, j] * x[ch, i, nn]
                out[ch, i, n] = acc
    return out


def ltfa(x, dwf_w, dwf_b, vf_w, vf_b, dwt_w, dwt_b, vt_w, vt_b):
    bsz = x.shape[0]
    out = np.zeros_like(x, dtype=np.float64)
    for b in range(bsz):
        zf = pointwise(depthwise(x[b], dwf_w[:, :, 0], dwf_b, 0), vf_w, vf_b)
        zt = pointwise(depthwise(x[b], dwt_w[:, 0, :], dwt_b, 1), vt_w, vt_b)
        sf = np.vectorize(sigmoid)(zf)
        st = np.vectorize(sigmoid)(zt)
        out[b] = x[b] * sf * st
    return out


def afm(x, vr_w, vr_b, gamma, beta, vg_w, vg_b, groups, eps=1e-5):
    bsz, c = x.shape[:2]
    out = np.zeros((bsz, vg_w.shape[0]))
    for b in range(bsz):
        pooled = [x[b, ch].sum() / x[b, ch].size for ch in range(c)]
        r = [vr_b[o] + sum(vr_w[o, ch] * pooled[ch] for ch in range(c)) for o in range(vr_w.shape[0])]
        size = len(r) // groups
        normed = []
        for g in range(groups):
            vals = r[g * size : (g + 1) * size]
            mu = sum(vals) / size
            var = sum((v - mu) ** 2 for v in vals) / size
            normed += [(v - mu) / math.sqrt(var + eps) for v in vals]
        h = [max(0.0, gamma[i] * normed[i] + beta[i]) for i in range(len(r))]
        logits = [vg_b[o] + sum(vg_w[o, i] * h[i] for i in range(len(h))) for o in range(vg_w.shape[0])]
        m = max(logits)
        e = [math.exp(z - m) for z in logits]
        out[b] = [v / sum(e) for v in e]
    return out


def bn_eval(h, gamma, beta, mean, var, eps=1e-5):
    out = np.zeros_like(h, dtype=np.float64)
    for i in range(h.shape[0]):
        for j in range(h.shape[1]):
            out[i, j] = gamma[j] * (h[i, j] - mean[j]) / math.sqrt(var[j] + eps) + beta[j]
    return out


def matvec_layer(x, w, b):
    out = np.zeros((x.shape[0], w.shape[0]))
    for i in range(x.shape[0]):
        for o in range(w.shape[0]):
            out[i, o] = b[o] + sum(w[o, k] * x[i, k] for k in range(w.shape[1]))
    return out


def classifier_eval(flat, p, buf):
    h = matvec_layer(flat, p["cls.fc1.w"], p["cls.fc1.b"])
    h = np.maximum(bn_eval(h, p["cls.bn1.gamma"], p["cls.bn1.beta"], buf["cls.bn1.mean"], buf["cls.bn1.var"]), 0)
    h = matvec_layer(h, p["cls.fc2.w"], p["cls.fc2.b"])
    h = np.maximum(bn_eval(h, p["cls.bn2.gamma"], p["cls.bn2.beta"], buf["cls.bn2.mean"], buf["cls.bn2.var"]), 0)
    return matvec_layer(h, p["cls.fc3.w"], p["cls.fc3.b"])


def neg_log_softmax(logits, labels):
    total = 0.0
    for z, y in zip(logits, labels):
        m = max(z)
        lse = m + math.log(sum(math.exp(v - m) for v in z))
        total += lse - z[y]
    return total / len(labels)
