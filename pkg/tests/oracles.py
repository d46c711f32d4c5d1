"""Independent reference computations used by the tests.

Nothing here calls into the code paths it is used to check: rules are
grounded by dense boolean tensors over every variable assignment, gradients
by central differences.
"""

import itertools

import numpy as np

from zsrel.kgstore import KnowledgeGraph, Vocab


def random_kg(rng, max_entities=50, max_relations=6, max_triples=300, min_entities=3):
    n_e = int(rng.integers(min_entities, max_entities + 1))
    n_r = int(rng.integers(1, max_relations + 1))
    n_t = int(rng.integers(1, max_triples + 1))
    # small graphs get denser so that rules actually fire
    if rng.random() < 0.5:
        n_e = int(rng.integers(min_entities, min(12, max_entities) + 1))
    triples = [(int(rng.integers(n_e)), int(rng.integers(n_r)), int(rng.integers(n_e))) for _ in range(n_t)]
    return KnowledgeGraph(Vocab(f"e{i}" for i in range(n_e)), Vocab(f"r{j}" for j in range(n_r)), triples)


def adjacency(kg):
    A = np.zeros((kg.n_relations, kg.n_entities, kg.n_entities), dtype=bool)
    for h, r, t in kg.triples:
        A[r, h, t] = True
    return A


def _distinct_mask(n, k):
    grids = np.meshgrid(*[np.arange(n)] * k, indexing="ij")
    mask = np.ones((n,) * k, dtype=bool)
    for a, b in itertools.combinations(range(k), 2):
        mask &= grids[a] != grids[b]
    return mask


def grounded_pairs(A, body, head_vars):
    """Boolean matrix over (head subject, head object) bindings for which some
    injective assignment of all variables satisfies every body atom."""
    variables = sorted({v for atom in body for v in atom[1:]} | set(head_vars))
    k = len(variables)
    n = A.shape[1]
    axis = {v: i for i, v in enumerate(variables)}
    T = _distinct_mask(n, k)
    for rel, s, o in body:
        shape = [1] * k
        shape[axis[s]] = n
        shape[axis[o]] = n
        mat = A[rel] if axis[s] < axis[o] else A[rel].T
        T = T & mat.reshape(shape)
    others = tuple(i for v, i in axis.items() if v not in head_vars)
    P = T.any(axis=others) if others else T
    if axis[head_vars[0]] > axis[head_vars[1]]:
        P = P.T
    return P


def brute_force_metrics(A, body, head):
    rel, hs, ho = head
    P = grounded_pairs(A, body, (hs, ho))
    support = int(np.sum(P & A[rel]))
    has_fact = A[rel].any(axis=1)
    denom = int(np.sum(P & has_fact[:, None]))
    n_facts = int(A[rel].sum())
    hc = support / n_facts if n_facts else 0.0
    pca = support / denom if denom else 0.0
    return support, hc, pca


def enumerate_chain_rules(n_relations):
    """Every closed rule with head r(x, z) whose body is a single atom over
    {x, z} or two atoms that both contain the fresh variable y."""
    pairs2 = [(a, b) for a in "xyz" for b in "xyz" if a != b]
    rules = []
    for head_rel in range(n_relations):
        head = (head_rel, "x", "z")
        for r1 in range(n_relations):
            for s, o in (("x", "z"), ("z", "x")):
                atom = (r1, s, o)
                if atom != head:
                    rules.append(((atom,), head))
        for (s1, o1), (s2, o2) in itertools.product(pairs2, repeat=2):
            v1, v2 = {s1, o1}, {s2, o2}
            if v1 != {"x", "y"} or v2 != {"y", "z"}:
                continue
            for r1, r2 in itertools.product(range(n_relations), repeat=2):
                rules.append((((r1, s1, o1), (r2, s2, o2)), head))
    return rules


def brute_force_rules(kg, min_support=1, min_hc=0.0, min_pca=0.0):
    """{(body, head): (support, hc, pca)} for every rule passing the thresholds."""
    A = adjacency(kg)
    out = {}
    cache = {}
    for body, head in enumerate_chain_rules(kg.n_relations):
        if body not in cache:
            cache[body] = grounded_pairs(A, body, ("x", "z"))
        P = cache[body]
        rel = head[0]
        support = int(np.sum(P & A[rel]))
        if support < min_support:
            continue
        denom = int(np.sum(P & A[rel].any(axis=1)[:, None]))
        hc = support / int(A[rel].sum())
        pca = support / denom
        if hc >= min_hc and pca >= min_pca:
            out[(body, head)] = (support, hc, pca)
    return out


def central_diff(f, arrays, eps=1e-6):
    """Numerical gradient of scalar f() w.r.t. each array (modified in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = arr[i]
            arr[i] = orig + eps
            up = f()
            arr[i] = orig - eps
            down = f()
            arr[i] = orig
            g[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)
