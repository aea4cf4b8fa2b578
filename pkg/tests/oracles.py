"""Independent brute-force references shared by unit and acceptance tests.

Everything here is written against the definitions, not the library code:
plain loops, direct formulas, no shortcuts.
"""

import numpy as np


def mha_oracle(q_lat, q_text, k_lat, k_text, v_lat, v_text, kv=None, heads=1):
    """Per-query softmax attention over [latent, injected, text] keys.

    All arguments are numpy arrays [B, S, d] (text/injected may be None).
    Returns (out_lat, out_text) computed with explicit per-head loops.
    """
    b, s_lat, d = q_lat.shape
    dh = d // heads
    qs = [q_lat] if q_text is None else [q_lat, q_text]
    ks = [k_lat]
    vs = [v_lat]
    if kv is not None:
        ks.append(kv[0])
        vs.append(kv[1])
    if k_text is not None:
        ks.append(k_text)
        vs.append(v_text)
    q = np.concatenate(qs, axis=1)
    k = np.concatenate(ks, axis=1)
    v = np.concatenate(vs, axis=1)
    sq, sk = q.shape[1], k.shape[1]
    out = np.zeros((b, sq, d), dtype=q.dtype)
    for bi in range(b):
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            for i in range(sq):
                logits = np.array([q[bi, i, sl] @ k[bi, j, sl] for j in range(sk)])
                logits = logits / np.sqrt(dh)
                weights = np.exp(logits - logits.max())
                weights = weights / weights.sum()
                out[bi, i, sl] = sum(weights[j] * v[bi, j, sl] for j in range(sk))
    if q_text is None:
        return out, None
    return out[:, :s_lat], out[:, s_lat:]


def conv2d_oracle(x, w, b=None, stride=(1, 1), padding=(0, 0)):
    """Six-loop cross-correlation reference."""
    sh, sw = stride
    ph, pw = padding
    bs, c, hin, win = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho = (hin + 2 * ph - kh) // sh + 1
    wo = (win + 2 * pw - kw) // sw + 1
    out = np.zeros((bs, o, ho, wo), dtype=x.dtype)
    for n in range(bs):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[oc]
                    for ic in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += xp[n, ic, i * sh + ki, j * sw + kj] * w[oc, ic, ki, kj]
                    out[n, oc, i, j] = acc
    return out


def ssim_oracle(a, b, window=8, k1=0.01, k2=0.03):
    """Windowed SSIM by explicit loops over positions and channels."""
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    _, ch, h, w = a.shape
    vals = []
    for n in range(a.shape[0]):
        for c in range(ch):
            for i in range(h - window + 1):
                for j in range(w - window + 1):
                    pa = a[n, c, i:i + window, j:j + window]
                    pb = b[n, c, i:i + window, j:j + window]
                    mu_a, mu_b = pa.mean(), pb.mean()
                    var_a, var_b = pa.var(), pb.var()
                    cov = ((pa - mu_a) * (pb - mu_b)).mean()
                    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
                    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
                    vals.append(num / den)
    return float(np.mean(vals))


def mmd_oracle(feat_a, feat_b, kernel):
    """Unbiased MMD^2 via the O(n^2) double loop."""
    m, n = len(feat_a), len(feat_b)
    xx = sum(kernel(feat_a[i], feat_a[j])
             for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    yy = sum(kernel(feat_b[i], feat_b[j])
             for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    xy = sum(kernel(feat_a[i], feat_b[j])
             for i in range(m) for j in range(n)) / (m * n)
    return float(xx + yy - 2 * xy)


def gaussian_frechet_diagonal(mu_a, var_a, mu_b, var_b):
    """Closed-form Frechet distance between axis-aligned Gaussians.

    With diagonal covariances the trace term reduces to
    sum(va + vb - 2*sqrt(va*vb)) per axis.
    """
    mu_a, var_a = np.asarray(mu_a), np.asarray(var_a)
    mu_b, var_b = np.asarray(mu_b), np.asarray(var_b)
    diff = mu_a - mu_b
    return float(diff @ diff + np.sum(var_a + var_b - 2.0 * np.sqrt(var_a * var_b)))
