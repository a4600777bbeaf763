"""Independent brute-force references used to check the package's outputs.

Everything here is a from-first-principles reimplementation with no shared
code paths into the package: plain loops, exhaustive enumeration, and naive
set arithmetic.
"""

import itertools
import math

import numpy as np


def all_partitions(items):
    """Every set partition of ``items`` (Bell-number many), as lists of sets."""
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for smaller in all_partitions(rest):
        for i in range(len(smaller)):
            yield smaller[:i] + [smaller[i] | {first}] + smaller[i + 1 :]
        yield smaller + [{first}]


def muc_reference(gold_sets, pred_sets):
    """MUC recall/precision/f1 from the link-based definition."""

    def half(key, response):
        num = den = 0
        for cluster in key:
            if len(cluster) < 2:
                continue
            touched = set()
            for resp in response:
                if cluster & resp:
                    touched.add(frozenset(resp))
            num += len(cluster) - len(touched)
            den += len(cluster) - 1
        return num, den

    r_num, r_den = half(gold_sets, pred_sets)
    p_num, p_den = half(pred_sets, gold_sets)
    r = r_num / r_den if r_den else 0.0
    p = p_num / p_den if p_den else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return r, p, f1


def b3_reference(gold_sets, pred_sets):
    """B-cubed recall/precision/f1 from the per-mention overlap definition."""
    mentions = sorted(set().union(*gold_sets)) if gold_sets else []

    def containing(sets, m):
        for s in sets:
            if m in s:
                return s
        raise AssertionError(f"mention {m} missing from a partition")

    r_terms, p_terms = [], []
    for m in mentions:
        g = containing(gold_sets, m)
        p = containing(pred_sets, m)
        r_terms.append(len(g & p) / len(g))
        p_terms.append(len(g & p) / len(p))
    r = sum(r_terms) / len(r_terms) if r_terms else 0.0
    p = sum(p_terms) / len(p_terms) if p_terms else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return r, p, f1


def ceaf_phi4_reference(gold_sets, pred_sets):
    """CEAF recall/precision/f1 via exhaustive search over one-to-one alignments."""

    def phi4(a, b):
        return 2 * len(a & b) / (len(a) + len(b))

    if not gold_sets or not pred_sets:
        return 0.0, 0.0, 0.0
    small, large = (gold_sets, pred_sets) if len(gold_sets) <= len(pred_sets) else (
        pred_sets,
        gold_sets,
    )
    best = 0.0
    for chosen in itertools.permutations(range(len(large)), len(small)):
        total = sum(phi4(small[i], large[j]) for i, j in enumerate(chosen))
        best = max(best, total)
    r = best / len(gold_sets)
    p = best / len(pred_sets)
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return r, p, f1


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, u):
        while self.parent[u] != u:
            self.parent[u] = self.parent[self.parent[u]]
            u = self.parent[u]
        return u

    def union(self, u, v):
        ru, rv = self.find(u), self.find(v)
        if ru != rv:
            self.parent[max(ru, rv)] = min(ru, rv)


def components_by_unionfind(n, edges):
    """Connected components over n nodes from an edge list, as frozensets."""
    uf = _UnionFind(n)
    for i, j in edges:
        uf.union(i, j)
    groups = {}
    for m in range(n):
        groups.setdefault(uf.find(m), set()).add(m)
    return {frozenset(g) for g in groups.values()}


def iou_reference(a, b):
    """IoU by rasterizing boxes onto a fine grid (definitively independent)."""
    cells = 800
    xs = np.linspace(0, 1, cells, endpoint=False) + 0.5 / cells
    grid_x, grid_y = np.meshgrid(xs, xs)

    def mask(box):
        x, y, w, h = box
        return (grid_x >= x) & (grid_x < x + w) & (grid_y >= y) & (grid_y < y + h)

    ma, mb = mask(a), mask(b)
    union = np.count_nonzero(ma | mb)
    return np.count_nonzero(ma & mb) / union if union else 0.0


def cosine_matrix(emb):
    emb = np.asarray(emb, dtype=float)
    unit = emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    return np.clip(unit @ unit.T, -1.0, 1.0)


# ---------------------------------------------------------------------------
# straight-line loss recomputations (plain numpy, no autodiff)
# ---------------------------------------------------------------------------


def cr_loss_reference(embeddings, positives, negatives, tau, denominator="negatives"):
    emb = np.asarray(embeddings, dtype=float)
    unit = emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    total = 0.0
    for m in range(len(unit)):
        pos, neg = positives[m], negatives[m]
        if not pos:
            continue
        pool = list(neg) if denominator == "negatives" else list(neg) + list(pos)
        denom = sum(math.exp(float(unit[m] @ unit[a]) / tau) for a in pool)
        inner = 0.0
        for p in pos:
            inner += math.log(math.exp(float(unit[m] @ unit[p]) / tau) / denom)
        total += -inner / len(pos)
    return total


def gd_loss_reference(g_values, h_values):
    g = np.asarray(g_values, dtype=float)
    h = np.asarray(h_values, dtype=float)
    total = 0.0
    for m in range(g.shape[0]):
        for r in range(g.shape[1]):
            if h[m, r] == 1.0:
                total += -math.log(max(g[m, r], 1e-12))
    return total


def pcr_loss_reference(embeddings, pos_sets, neg_sets, alpha):
    emb = np.asarray(embeddings, dtype=float)
    unit = emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    total = 0.0
    for m in range(len(unit)):
        if not pos_sets[m] or not neg_sets[m]:
            continue
        mu_p = unit[list(pos_sets[m])].mean(axis=0)
        mu_a = unit[list(neg_sets[m])].mean(axis=0)
        d_pos = float(((unit[m] - mu_p) ** 2).sum())
        d_neg = float(((unit[m] - mu_a) ** 2).sum())
        total += max(d_pos - d_neg + alpha, 0.0)
    return total


def itc_loss_reference(region_emb, mention_emb, selected):
    regions = np.asarray(region_emb, dtype=float)
    mentions = np.asarray(mention_emb, dtype=float)
    total = 0.0
    for m in range(len(mentions)):
        scores = regions @ mentions[m]
        shifted = scores - scores.max()
        logz = math.log(np.exp(shifted).sum())
        total += -(shifted[selected[m]] - logz)
    return total


def mlm_loss_reference(logits, masked_positions, original_ids):
    logits = np.asarray(logits, dtype=float)
    if not masked_positions:
        return 0.0
    total = 0.0
    for pos in masked_positions:
        row = logits[pos]
        shifted = row - row.max()
        logz = math.log(np.exp(shifted).sum())
        total += -(shifted[original_ids[pos]] - logz)
    return total / len(masked_positions)


def smooth_l1_reference(residual, beta):
    r = abs(float(residual))
    if r < beta:
        return 0.5 * r * r / beta
    return r - 0.5 * beta
