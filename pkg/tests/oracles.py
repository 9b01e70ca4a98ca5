"""Independent brute-force reference implementations used to cross-check the
library.  Everything here is deliberately written as plain loops over scalars
(or full sorts) and shares no code with the package."""

import math
from collections import deque

import numpy as np
import torch


# --- scalar linear algebra ---


def affine_rows(x, weight, bias):
    """Row-by-row, element-by-element affine map: out[i][j] = sum_k x[i][k] w[j][k] + b[j]."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    out = np.zeros((x.shape[0], weight.shape[0]))
    for i in range(x.shape[0]):
        for j in range(weight.shape[0]):
            acc = 0.0
            for k in range(x.shape[1]):
                acc += x[i][k] * weight[j][k]
            out[i][j] = acc + bias[j]
    return out


def cosine(a, b, eps=1e-12):
    num = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) ** 2 for x in a))
    nb = math.sqrt(sum(float(y) ** 2 for y in b))
    return num / (max(na, eps) * max(nb, eps))


def softmax_list(values):
    mx = max(values)
    exps = [math.exp(v - mx) for v in values]
    z = sum(exps)
    return [e / z for e in exps]


# --- encoder ---


def enhancer_forward(x, wq, wk, wv, wo):
    """Residual single-layer attention over all rows, scalar arithmetic."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    q = x @ np.asarray(wq, dtype=np.float64)
    k = x @ np.asarray(wk, dtype=np.float64)
    v = x @ np.asarray(wv, dtype=np.float64)
    out = np.array(x)
    for i in range(n):
        scores = [float(q[i] @ k[j]) / math.sqrt(d) for j in range(n)]
        attn = softmax_list(scores)
        mixed = np.zeros(d)
        for j in range(n):
            mixed += attn[j] * v[j]
        out[i] = x[i] + mixed @ np.asarray(wo, dtype=np.float64)
    return out


def ggla_weights(query, codebook, query_maps, codebook_maps):
    """Per-transformation loop: cosine coefficients, mean over maps, softmax."""
    query = np.asarray(query, dtype=np.float64)
    codebook = np.asarray(codebook, dtype=np.float64)
    n = codebook.shape[0]
    sums = [0.0] * n
    n_maps = len(query_maps)
    for k in range(n_maps):
        qk = np.asarray(query_maps[k], dtype=np.float64) @ query
        for j in range(n):
            cj = np.asarray(codebook_maps[k], dtype=np.float64) @ codebook[j]
            sums[j] += cosine(qk, cj)
    return softmax_list([s / n_maps for s in sums])


def gated_fuse(fine, global_, w, b):
    """Scalar sigmoid gate, convex mix, then L2 normalization."""
    fine = np.asarray(fine, dtype=np.float64)
    global_ = np.asarray(global_, dtype=np.float64)
    z = float(np.concatenate([fine, global_]) @ np.asarray(w, dtype=np.float64)) + float(b)
    gate = 1.0 / (1.0 + math.exp(-z))
    fused = gate * fine + (1.0 - gate) * global_
    return fused / max(math.sqrt(float(fused @ fused)), 1e-12), gate


# --- prototype ---


def sinkhorn(scores, iters, eps):
    """Naive-loop entropic transport with the package's normalization order."""
    scores = np.asarray(scores, dtype=np.float64)
    m, k = scores.shape
    shift = scores.max() / eps
    mat = np.zeros((m, k))
    for i in range(m):
        for j in range(k):
            mat[i][j] = math.exp(scores[i][j] / eps - shift)
    for _ in range(iters):
        for j in range(k):
            col = sum(mat[i][j] for i in range(m))
            for i in range(m):
                mat[i][j] = mat[i][j] / (k * col)
        for i in range(m):
            row = sum(mat[i][j] for j in range(k))
            for j in range(k):
                mat[i][j] = mat[i][j] / (m * row)
    return mat * m


def cross_entropy_alignment(u_v, u_t, d_v, d_t, tau):
    """Hand softmax-cross-entropy in both directions."""
    u_v = np.asarray(u_v, dtype=np.float64)
    u_t = np.asarray(u_t, dtype=np.float64)
    m = u_v.shape[0]
    total = 0.0
    for u, d in [(u_v, d_t), (u_t, d_v)]:
        acc = 0.0
        for i in range(m):
            probs = softmax_list([x / tau for x in u[i]])
            acc += -sum(float(d[i][j]) * math.log(probs[j]) for j in range(u.shape[1]))
        total += acc / m
    return total


# --- momentum ---


def info_nce(anchor, positive, bank_rows, tau):
    """Single-anchor InfoNCE with the positive prepended to the candidates."""
    sims = [cosine(anchor, positive)] + [cosine(anchor, z) for z in bank_rows]
    probs = softmax_list([s / tau for s in sims])
    return -math.log(probs[0])


def fifo_contents(pushes, capacity):
    """Expected retained rows, oldest first, after a sequence of batch pushes."""
    dq = deque(maxlen=capacity)
    for batch in pushes:
        for row in batch:
            dq.append(np.asarray(row, dtype=np.float32))
    return list(dq)


# --- neighborhood ---


def kernel_similarity(a, b, epsilon):
    d2 = sum((float(x) - float(y)) ** 2 for x, y in zip(a, b))
    return math.exp(-d2 / epsilon)


def avg_max_match(rows_a, rows_b):
    """Mean over rows_a of the best dot product against rows_b."""
    best = []
    for ra in rows_a:
        best.append(max(sum(float(x) * float(y) for x, y in zip(ra, rb)) for rb in rows_b))
    return sum(best) / len(best)


def gcn_forward(h, adj, weight, guard=1e-6, slope=0.01):
    """Residual normalized graph convolution, scalar arithmetic."""
    h = np.asarray(h, dtype=np.float64)
    adj = np.clip(np.asarray(adj, dtype=np.float64), 0.0, None)
    n = h.shape[0]
    deg = [sum(adj[i]) + guard for i in range(n)]
    prop = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            prop[i][j] = adj[i][j] / math.sqrt(deg[i]) / math.sqrt(deg[j])
    pre = prop @ h @ np.asarray(weight, dtype=np.float64)
    act = np.where(pre >= 0, pre, slope * pre)
    return h + act


def filter_blocks(s, alpha, mask_value=-1e9):
    """Sort-based per-quadrant median threshold with ties kept."""
    s = np.asarray(s, dtype=np.float64)
    n = s.shape[0]
    m = n // 2
    out = np.empty_like(s)
    for bi in (slice(0, m), slice(m, n)):
        for bj in (slice(0, m), slice(m, n)):
            block = s[bi, bj]
            flat = sorted(block.reshape(-1).tolist())
            cnt = len(flat)
            if cnt % 2 == 1:
                med = flat[cnt // 2]
            else:
                med = 0.5 * (flat[cnt // 2 - 1] + flat[cnt // 2])
            out[bi, bj] = np.where(block >= med, alpha * block, mask_value)
    return out


def kept_count(block, alpha=1.5):
    """Number of entries at or above the block median (ceil(n/2) plus ties)."""
    flat = sorted(np.asarray(block, dtype=np.float64).reshape(-1).tolist())
    cnt = len(flat)
    if cnt % 2 == 1:
        med = flat[cnt // 2]
    else:
        med = 0.5 * (flat[cnt // 2 - 1] + flat[cnt // 2])
    return sum(1 for v in flat if v >= med)


def masked_attention(h, bias, wq, wk, wv):
    """Masked-softmax attention with residual and row renormalization."""
    h = np.asarray(h, dtype=np.float64)
    n, d = h.shape
    q = h @ np.asarray(wq, dtype=np.float64)
    k = h @ np.asarray(wk, dtype=np.float64)
    v = h @ np.asarray(wv, dtype=np.float64)
    out = np.zeros_like(h)
    for i in range(n):
        scores = [float(q[i] @ k[j]) / math.sqrt(d) + float(bias[i][j]) for j in range(n)]
        attn = softmax_list(scores)
        mixed = np.zeros(d)
        for j in range(n):
            mixed += attn[j] * v[j]
        row = h[i] + mixed
        out[i] = row / max(math.sqrt(float(row @ row)), 1e-12)
    return out


def hardest_negative_triplet(sims, gamma):
    """Exhaustive hinge over every negative, keeping the max per direction."""
    sims = np.asarray(sims, dtype=np.float64)
    m = sims.shape[0]
    if m < 2:
        return 0.0
    total = 0.0
    for i in range(m):
        worst_txt = max(sims[i][j] for j in range(m) if j != i)
        worst_img = max(sims[j][i] for j in range(m) if j != i)
        total += max(0.0, gamma - sims[i][i] + worst_txt)
        total += max(0.0, gamma - sims[i][i] + worst_img)
    return total


# --- metrics (full-sort reference pipeline) ---


def full_sort_ranking(sim_row):
    return sorted(range(len(sim_row)), key=lambda j: (-sim_row[j], j))


def recall_hit(sims, positives, k):
    hits = []
    for q in range(len(sims)):
        order = full_sort_ranking(sims[q])
        hits.append(1.0 if any(g in positives[q] for g in order[:k]) else 0.0)
    return float(np.mean(np.asarray(hits, dtype=np.float64)) * 100.0)


def recall_coverage(sims, positives, k):
    vals = []
    for q in range(len(sims)):
        order = full_sort_ranking(sims[q])
        inter = sum(1 for g in order[:k] if g in positives[q])
        vals.append(inter / float(len(positives[q])))
    return float(np.mean(np.asarray(vals, dtype=np.float64)) * 100.0)


def r_precision(sims, positives):
    vals = []
    for q in range(len(sims)):
        order = full_sort_ranking(sims[q])
        r = len(positives[q])
        vals.append(sum(1 for g in order[:r] if g in positives[q]) / float(r))
    return float(np.mean(np.asarray(vals, dtype=np.float64)) * 100.0)


def mean_average_precision(sims, positives):
    vals = []
    for q in range(len(sims)):
        order = full_sort_ranking(sims[q])
        pos = set(positives[q])
        hits = 0
        terms = []
        for rank, g in enumerate(order, start=1):
            if g in pos:
                hits += 1
                terms.append(hits / float(rank))
            else:
                terms.append(0.0)
        vals.append(np.sum(np.asarray(terms, dtype=np.float64)) / float(len(pos)))
    return float(np.mean(np.asarray(vals, dtype=np.float64)) * 100.0)


# --- gradients ---


def finite_difference_grad(fn, tensor, step=1e-4):
    """Central finite differences of a scalar-valued closure wrt one tensor."""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        plus = float(fn())
        flat[i] = orig - step
        minus = float(fn())
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * step)
    return grad


def max_rel_error(analytic, reference):
    """Max absolute deviation scaled by the reference magnitude (floor 1e-6)."""
    num = (analytic - reference).abs().max().item()
    den = max(reference.abs().max().item(), 1e-6)
    return num / den
