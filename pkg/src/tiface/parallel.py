"""Deterministic chunked execution for ray batches."""
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def chunk_slices(n, parts):
    parts = max(1, min(int(parts), n)) if n else 1
    edges = np.linspace(0, n, parts + 1).round().astype(int)
    return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def pmap(fn, items, workers=1):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def tree_sum(grads):
    """Pairwise sum of a list of gradient dicts in a fixed order."""
    grads = list(grads)
    while len(grads) > 1:
        nxt = []
        for i in range(0, len(grads) - 1, 2):
            a, b = grads[i], grads[i + 1]
            nxt.append({k: a[k] + b[k] for k in a})
        if len(grads) % 2:
            nxt.append(grads[-1])
        grads = nxt
    return grads[0]
