"""Independent reference implementations: plain loops, no shared helpers with the package."""

import math

import numpy as np


def oracle_mpm(targets, predictions, positions, tau):
    N, L, _ = predictions.shape
    total = 0.0
    for k, (i, j) in enumerate(positions):
        logits = [float(np.dot(targets[k], predictions[a, b])) / tau for a in range(N) for b in range(L)]
        m = max(logits)
        den = m + math.log(math.fsum(math.exp(z - m) for z in logits))
        total += float(np.dot(targets[k], predictions[i, j])) / tau - den
    return -total / len(positions)


def oracle_qpm(u, v, p, mbns, mbns_p, cdns, cdns_p, w1, w2):
    def s(x, prob):
        return float(np.dot(u, x)) - math.log(prob)

    terms = [(1.0, s(v, p))]
    terms += [(w1, s(x, q)) for x, q in zip(mbns, mbns_p)]
    terms += [(w2, s(x, q)) for x, q in zip(cdns, cdns_p)]
    m = max(z for _, z in terms)
    den = math.fsum(w * math.exp(z - m) for w, z in terms)
    return -(s(v, p) - m - math.log(den))


def naive_filter(results, expr, catalog):
    return [pid for pid in results if all(catalog[pid].attribute(n) == v for n, v in expr.conjuncts)]


def recount_recall(cases, k):
    hits = 0
    for c in cases:
        found = False
        for pid in c.retrieved[:k]:
            for t in c.target_ids:
                if pid == t:
                    found = True
        hits += found
    return hits / len(cases)


def recount_pair_mean(cases, f):
    total = 0.0
    for c in cases:
        if not c.retrieved:
            continue
        s = 0.0
        for pid in c.retrieved:
            s += f(c, pid)
        total += s / len(c.retrieved)
    return total / len(cases)


def jaccard_by_hand(query, product):
    q, t = list(set(query.tokens)), list(set(product.title_tokens))
    inter = sum(1 for a in q if a in t)
    return inter / (len(q) + len(t) - inter)
