"""Slow, loop-based reference implementations used only by the tests.

Nothing here imports the package's numerics; every formula is written out
row by row so it can serve as an independent check.
"""

import math

import numpy as np


def softmax(v):
    v = np.asarray(v, dtype=float)
    e = np.exp(v - v.max())
    return e / e.sum()


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def brute_source_attention(p, e_s, m=None):
    """Enumerate every visible prefix: ``alpha[j] = sum_{k>=j} p[k] softmax(e_s[:k])[j]``."""
    J = len(p)
    m = J if m is None else m
    alpha = np.zeros(J)
    for k in range(1, m + 1):
        w = softmax(e_s[:k])
        for j in range(k):
            alpha[j] += p[k - 1] * w[j]
    return alpha


def brute_max_source_attention(p, e_s, m=None):
    J = len(p)
    m = J if m is None else m
    best = 0
    for k in range(1, m):
        if p[k] > p[best]:
            best = k
    mass = sum(p[:m])
    alpha = np.zeros(J)
    w = softmax(e_s[: best + 1])
    for j in range(best + 1):
        alpha[j] = mass * w[j]
    return alpha


def brute_target_attention(p, e_t, m=None):
    m = len(p) if m is None else m
    return (1.0 - sum(p[:m])) * softmax(e_t)


def cost_matrix(I, J, eps):
    C = [[0.0] * J for _ in range(I)]
    for i in range(1, I + 1):
        for j in range(1, J + 1):
            dev = abs(j - i * J / I)
            C[i - 1][j - 1] = max(dev - eps, 0.0) / max(I, J)
    return np.array(C)


def layer_norm(x, g, b, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return np.array([(v - mu) / math.sqrt(var + eps) for v in x]) * g + b


def forward(params, cfg, x, y_in, bounds=None, mode="ssa"):
    """Row-by-row forward for one sentence pair.

    ``params`` maps names to numpy arrays, ``cfg`` is a model config.
    Returns ``(logits [I, V], [p per layer])``.
    """
    P = params
    J, I = len(x), len(y_in)
    H = cfg.heads
    d = cfg.model_dim
    dh = d // H
    bounds = [J] * I if bounds is None else list(bounds)
    hs = [P["embed.tokens"][x[j]] + P["embed.source_pos"][j] + P["embed.segment"][0] for j in range(J)]
    ht = [P["embed.tokens"][y_in[i]] + P["embed.target_pos"][i] + P["embed.segment"][1] for i in range(I)]
    allocations = []

    def ffn(h, pre):
        a = layer_norm(h, P[pre + "ln2.gain"], P[pre + "ln2.bias"])
        hidden = np.maximum(a @ P[pre + "ffn.w1"] + P[pre + "ffn.b1"], 0.0)
        return h + hidden @ P[pre + "ffn.w2"] + P[pre + "ffn.b2"]

    for n in range(cfg.layers):
        pre = f"layer{n}."
        a_s = [layer_norm(h, P[pre + "ln1.gain"], P[pre + "ln1.bias"]) for h in hs]
        a_t = [layer_norm(h, P[pre + "ln1.gain"], P[pre + "ln1.bias"]) for h in ht]
        proj = lambda rows, w: [r @ P[pre + w] for r in rows]
        qs, ks, vs = proj(a_s, "wq"), proj(a_s, "wk"), proj(a_s, "wv")
        qt, kt, vt = proj(a_t, "wq"), proj(a_t, "wk"), proj(a_t, "wv")

        p = np.zeros((I, J))
        if mode == "ssa":
            for i in range(I):
                pt = sum(a_t[: i + 1]) / (i + 1)
                for j in range(J):
                    ps = sum(a_s[: j + 1]) / (j + 1)
                    p[i, j] = sigmoid((pt @ P[pre + "uq"]) @ (ps @ P[pre + "uk"]) / math.sqrt(d))
            allocations.append(p)

        new_t = []
        for i in range(I):
            m = bounds[i]
            ctx = np.zeros(d)
            for h in range(H):
                sl = slice(h * dh, (h + 1) * dh)
                es = [qt[i][sl] @ ks[j][sl] / math.sqrt(dh) for j in range(J)]
                et = [qt[i][sl] @ kt[k][sl] / math.sqrt(dh) for k in range(i + 1)]
                if mode == "ssa":
                    als = brute_source_attention(p[i], np.array(es), m)
                    alt = brute_target_attention(p[i], np.array(et), m)
                else:
                    w = softmax(es[:m] + et)
                    als = np.concatenate([w[:m], np.zeros(J - m)])
                    alt = w[m:]
                ctx[sl] = sum(als[j] * vs[j][sl] for j in range(J)) + sum(alt[k] * vt[k][sl] for k in range(i + 1))
            new_t.append(ffn(ht[i] + ctx @ P[pre + "wo"], pre))

        if n < cfg.layers - 1:
            new_s = []
            for j in range(J):
                ctx = np.zeros(d)
                for h in range(H):
                    sl = slice(h * dh, (h + 1) * dh)
                    w = softmax([qs[j][sl] @ ks[l][sl] / math.sqrt(dh) for l in range(j + 1)])
                    ctx[sl] = sum(w[l] * vs[l][sl] for l in range(j + 1))
                new_s.append(ffn(hs[j] + ctx @ P[pre + "wo"], pre))
            hs = new_s
        ht = new_t

    logits = np.array([layer_norm(h, P["final_ln.gain"], P["final_ln.bias"]) @ P["out.w"] + P["out.b"]
                       for h in ht])
    return logits, allocations
