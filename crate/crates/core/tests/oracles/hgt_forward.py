"""Straight-line reference for one HGT layer, written with explicit loops.

Generates seeded parameters and features, runs the forward pass node by
node, and writes everything to ../fixtures/hgt_forward.json.
"""
import json
import math
import os
import random

N, D, H, L = 2, 4, 2, 1
DH = D // H
rng = random.Random(42)


def mat(r, c):
    return [[rng.uniform(-1, 1) for _ in range(c)] for _ in range(r)]


types = ["candidate", "query"]
rels = ["cc", "qc", "cq"]
tensors = {}
params = {"q": {}, "k": {}, "theta": {}}
for h in range(H):
    for t in types:
        params["q"][(h, t)] = mat(D, DH)
    for t in types:
        params["k"][(h, t)] = mat(D, DH)
    for r in rels:
        params["theta"][(h, r)] = mat(DH, DH)
mu = {r: rng.uniform(0.5, 1.5) for r in rels}
W = mat(D, D)
b = [rng.uniform(-0.5, 0.5) for _ in range(D)]
X = mat(N + 1, D)


def node_type(v):
    return "query" if v == N else "candidate"


def in_neighbors(j):
    out = []
    for i in range(N + 1):
        if i == j:
            continue
        if j < N and i < N:
            out.append((i, "cc"))
        elif j < N and i == N:
            out.append((i, "qc"))
        elif j == N:
            out.append((i, "cq"))
    return out


def vecmat(v, m):
    return [sum(v[a] * m[a][c] for a in range(len(v))) for c in range(len(m[0]))]


def dot(u, v):
    return sum(a * c for a, c in zip(u, v))


out = []
for j in range(N + 1):
    nbrs = in_neighbors(j)
    per_head = []
    for h in range(H):
        qj = vecmat(X[j], params["q"][(h, node_type(j))])
        keys, logits = [], []
        for i, r in nbrs:
            ki = vecmat(X[i], params["k"][(h, node_type(i))])
            keys.append(ki)
            logits.append(dot(vecmat(qj, params["theta"][(h, r)]), ki) * mu[r] / math.sqrt(D))
        m = max(logits)
        e = [math.exp(x - m) for x in logits]
        s = sum(e)
        per_head.append([(w / s, k) for w, k in zip(e, keys)])
    acc = [0.0] * D
    for n_idx in range(len(nbrs)):
        msg = []
        for h in range(H):
            w, k = per_head[h][n_idx]
            msg.extend(w * x for x in k)
        y = [v + bb for v, bb in zip(vecmat(msg, W), b)]
        acc = [a + v for a, v in zip(acc, y)]
    out.append([a / len(nbrs) for a in acc])


def flat(m):
    return [x for row in m for x in row]


named = []
for h in range(H):
    for t in types:
        named.append({"name": f"hgt.l0.h{h}.q_lin.{t}", "shape": [D, DH], "data": flat(params["q"][(h, t)])})
    for t in types:
        named.append({"name": f"hgt.l0.h{h}.k_lin.{t}", "shape": [D, DH], "data": flat(params["k"][(h, t)])})
    for r in rels:
        named.append({"name": f"hgt.l0.h{h}.theta.{r}", "shape": [DH, DH], "data": flat(params["theta"][(h, r)])})
named.append({"name": "hgt.l0.mu", "shape": [3], "data": [mu[r] for r in rels]})
named.append({"name": "hgt.l0.mlp0.weight", "shape": [D, D], "data": flat(W)})
named.append({"name": "hgt.l0.mlp0.bias", "shape": [D], "data": b})

path = os.path.join(os.path.dirname(__file__), "..", "fixtures", "hgt_forward.json")
with open(path, "w") as f:
    json.dump({"n": N, "dim": D, "heads": H, "layers": L, "features": X, "params": named, "output": out}, f, indent=1)
print(json.dumps(out))
