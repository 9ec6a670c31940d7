#!/usr/bin/env python3
"""Independent reference values for the unit tests.

Every quantity is computed from its defining formula with mpmath at 50
significant digits using plain nested loops, then rounded to the nearest
double. Inputs are drawn once with a fixed numpy seed and written next to
the expected values, so the C++ side sees exactly the same doubles.

    python3 tests/oracles/make_oracles.py > tests/oracle_values.hpp
"""

import numpy as np
from mpmath import mp, mpf, exp, log, sqrt

mp.dps = 50
rng = np.random.default_rng(20240611)

COS_EPS = mpf("1e-12")
BN_EPS = mpf("1e-5")
MOMENTUM = mpf("0.1")

out = []


def emit(name, values):
    vals = [float(v) for v in values]
    body = ", ".join(repr(v) for v in vals)
    out.append(f"inline const std::vector<double> {name} = {{{body}}};")


def emit_int(name, values):
    out.append(f"inline const std::vector<std::uint32_t> {name} = {{{', '.join(str(int(v)) for v in values)}}};")


def draw(*shape, scale=1.0):
    return [float(v) for v in (rng.uniform(-1, 1, size=shape) * scale).round(4).ravel()]


def mat(flat, rows, cols):
    return [[mpf(flat[r * cols + c]) for c in range(cols)] for r in range(rows)]


def flatten(m):
    return [v for row in m for v in row]


def mm(a, b):
    return [[sum((a[i][k] * b[k][j] for k in range(len(b))), mpf(0)) for j in range(len(b[0]))]
            for i in range(len(a))]


def softmax(v):
    top = max(v)
    e = [exp(x - top) for x in v]
    s = sum(e)
    return [x / s for x in e]


def cosine(a, b):
    d = sum(x * y for x, y in zip(a, b))
    na = sqrt(sum(x * x for x in a))
    nb = sqrt(sum(x * x for x in b))
    return d / (na * nb + COS_EPS)


def batchnorm_train(x, scale, shift, rmean, rvar):
    b = len(x)
    w = len(x[0])
    y = [[None] * w for _ in range(b)]
    new_mean, new_var = [], []
    for c in range(w):
        col = [x[r][c] for r in range(b)]
        mean = sum(col) / b
        var = sum((v - mean) ** 2 for v in col) / b
        for r in range(b):
            y[r][c] = (col[r] - mean) / sqrt(var + BN_EPS) * scale[c] + shift[c]
        new_mean.append((1 - MOMENTUM) * rmean[c] + MOMENTUM * mean)
        new_var.append((1 - MOMENTUM) * rvar[c] + MOMENTUM * var * b / (b - 1))
    return y, new_mean, new_var


def batchnorm_eval(x, scale, shift, rmean, rvar):
    return [[(row[c] - rmean[c]) / sqrt(rvar[c] + BN_EPS) * scale[c] + shift[c] for c in range(len(row))]
            for row in x]


# --- matmul 4x5 * 5x3 -------------------------------------------------------
a = draw(4, 5, scale=3)
b = draw(5, 3, scale=3)
emit("kMatmulA", a)
emit("kMatmulB", b)
# Double arithmetic in the same k order, which the product must match bitwise.
prod = []
for i in range(4):
    for j in range(3):
        s = 0.0
        for k in range(5):
            s += a[i * 5 + k] * b[k * 3 + j]
        prod.append(s)
emit("kMatmulAB", prod)
emit("kMatmulABExact", flatten(mm(mat(a, 4, 5), mat(b, 5, 3))))

# --- softmax, cosine ---------------------------------------------------------
emit("kSoftmax123", softmax([mpf(1), mpf(2), mpf(3)]))
emit("kCosine1234", [cosine([mpf(1), mpf(2)], [mpf(3), mpf(4)])])

# --- batch norm 4x2 ----------------------------------------------------------
x = draw(4, 2, scale=2)
scale = draw(2)
shift = draw(2)
rmean = draw(2, scale=0.5)
rvar = [abs(v) + 0.5 for v in draw(2)]
emit("kBnX", x)
emit("kBnScale", scale)
emit("kBnShift", shift)
emit("kBnRunningMean", rmean)
emit("kBnRunningVar", rvar)
y, nm, nv = batchnorm_train(mat(x, 4, 2), [mpf(v) for v in scale], [mpf(v) for v in shift],
                            [mpf(v) for v in rmean], [mpf(v) for v in rvar])
emit("kBnTrainOut", flatten(y))
emit("kBnTrainRunningMean", nm)
emit("kBnTrainRunningVar", nv)
emit("kBnEvalOut", flatten(batchnorm_eval(mat(x, 4, 2), [mpf(v) for v in scale], [mpf(v) for v in shift],
                                          [mpf(v) for v in rmean], [mpf(v) for v in rvar])))


# --- heads -------------------------------------------------------------------
class Head:
    def __init__(self, d_bb, d_k, classes):
        self.d_bb, self.d_k, self.classes = d_bb, d_k, classes
        self.w = draw(d_bb, d_k)
        self.b = draw(d_k, scale=0.3)
        self.scale = [1 + v for v in draw(d_k, scale=0.3)]
        self.shift = draw(d_k, scale=0.3)
        self.rmean = draw(d_k, scale=0.3)
        self.rvar = [abs(v) + 0.5 for v in draw(d_k)]
        self.cw = draw(classes, d_k, scale=2)
        self.cb = draw(classes, scale=0.5)

    def emit(self, prefix):
        for field in ("w", "b", "scale", "shift", "rmean", "rvar", "cw", "cb"):
            emit(f"{prefix}_{field}", getattr(self, field))

    def bottleneck(self, x_flat, batch, train):
        pre = mm(mat(x_flat, batch, self.d_bb), mat(self.w, self.d_bb, self.d_k))
        pre = [[row[c] + mpf(self.b[c]) for c in range(self.d_k)] for row in pre]
        args = ([mpf(v) for v in self.scale], [mpf(v) for v in self.shift], [mpf(v) for v in self.rmean],
                [mpf(v) for v in self.rvar])
        if train:
            return batchnorm_train(pre, *args)
        return batchnorm_eval(pre, *args), None, None

    def classify(self, phi):
        cw = mat(self.cw, self.classes, self.d_k)
        return [sum((cw[c][k] * phi[k] for k in range(self.d_k)), mpf(0)) + mpf(self.cb[c])
                for c in range(self.classes)]


# bottleneck: 3x4 input, d_k = 3
h = Head(4, 3, 2)
h.emit("kBneck")
xb = draw(3, 4, scale=2)
emit("kBneckX", xb)
ev, _, _ = h.bottleneck(xb, 3, train=False)
emit("kBneckEval", flatten(ev))
tr, nm, nv = h.bottleneck(xb, 3, train=True)
emit("kBneckTrain", flatten(tr))
emit("kBneckTrainRunningMean", nm)
emit("kBneckTrainRunningVar", nv)

# cross-domain outputs: n = 3, C = 4, d_k = 2, batch 2
heads = [Head(3, 2, 4) for _ in range(3)]
for i, hd in enumerate(heads):
    emit(f"kCross{i}_cw", hd.cw)
    emit(f"kCross{i}_cb", hd.cb)
phis = [draw(2, 2) for _ in range(3)]
for i in range(3):
    emit(f"kCrossPhi{i}", phis[i])
# domain 1's stack: row m*n + j = classifier j applied to phi^1_m
stack = []
for m in range(2):
    for j in range(3):
        stack.extend(heads[j].classify([mpf(v) for v in phis[1][m * 2:(m + 1) * 2]]))
emit("kCrossStack1", stack)


# --- attention transcription -------------------------------------------------
def bi_aten(phis, outputs, w_o, w_f, w_qf, one_hot):
    """phis[i]: d_k list; outputs[i][j]: C list (classifier j on phi^i).
    Returns alpha (n x n), beta (n), ytilde (n x C), yfinal (C)."""
    n = len(phis)
    H = len(w_f)
    alpha = []
    for i in range(n):
        if one_hot:
            alpha.append([mpf(1) if j == i else mpf(0) for j in range(n)])
            continue
        sims = []
        for j in range(n):
            acc = mpf(0)
            for h in range(H):
                key = mm([phis[i]], w_f[h])[0]
                val = mm([outputs[i][j]], w_o[h])[0]
                acc += cosine(key, val)
            sims.append(acc / H)
        alpha.append(softmax(sims))
    C = len(outputs[0][0])
    ytilde = [[sum(alpha[i][j] * outputs[i][j][c] for j in range(n)) for c in range(C)] for i in range(n)]
    concat = [v for p in phis for v in p]
    sims = []
    for i in range(n):
        acc = mpf(0)
        for h in range(H):
            q = mm([concat], w_qf[h])[0]
            k = mm([phis[i]], w_f[h])[0]
            acc += cosine(q, k)
        sims.append(acc / H)
    beta = softmax(sims)
    yfinal = [sum(beta[i] * ytilde[i][c] for i in range(n)) for c in range(C)]
    return alpha, beta, ytilde, yfinal


def draw_attention(prefix, n, C, d_k, d_emb, H):
    w_o = [draw(C, d_emb) for _ in range(H)]
    w_f = [draw(d_k, d_emb) for _ in range(H)]
    w_qf = [draw(n * d_k, d_emb) for _ in range(H)]
    for h in range(H):
        emit(f"{prefix}WO{h}", w_o[h])
        emit(f"{prefix}WF{h}", w_f[h])
        emit(f"{prefix}WQF{h}", w_qf[h])
    return ([mat(w, C, d_emb) for w in w_o], [mat(w, d_k, d_emb) for w in w_f],
            [mat(w, n * d_k, d_emb) for w in w_qf])


# alpha/beta on a single sample: n = 2, C = 3, d_k = 2, d_emb = 2, H = 1
w_o, w_f, w_qf = draw_attention("kAttn", 2, 3, 2, 2, 1)
phi = [draw(2) for _ in range(2)]
outs = [[draw(3, scale=2) for _ in range(2)] for _ in range(2)]
for i in range(2):
    emit(f"kAttnPhi{i}", phi[i])
    emit(f"kAttnOut{i}", [v for row in outs[i] for v in row])
alpha, beta, yt, yf = bi_aten([[mpf(v) for v in p] for p in phi],
                              [[[mpf(v) for v in row] for row in o] for o in outs], w_o, w_f, w_qf, False)
emit("kAttnAlpha", flatten(alpha))
emit("kAttnBeta", beta)
emit("kAttnYTilde", flatten(yt))
emit("kAttnYFinal", yf)

# weighted sums
al = softmax([mpf(v) for v in draw(2)])
o2 = draw(2, 3)
emit("kIntraAlpha", al)
emit("kIntraOut", o2)
emit("kIntraY", [sum(al[j] * mpf(o2[j * 3 + c]) for j in range(2)) for c in range(3)])
be = softmax([mpf(v) for v in draw(3)])
y3 = draw(3, 2)
emit("kInterBeta", be)
emit("kInterY", y3)
emit("kInterOut", [sum(be[i] * mpf(y3[i * 2 + c]) for i in range(3)) for c in range(2)])

# full chain: n = 3, C = 4, d_k = 2, d_emb = 3, H = 2, batch 2
n, C, d_k, d_emb, H, B = 3, 4, 2, 3, 2, 2
fheads = [Head(3 + i, d_k, C) for i in range(n)]
for i, hd in enumerate(fheads):
    hd.emit(f"kFull{i}")
fx = [draw(B, 3 + i) for i in range(n)]
for i in range(n):
    emit(f"kFullX{i}", fx[i])
w_o, w_f, w_qf = draw_attention("kFull", n, C, d_k, d_emb, H)
for train in (False, True):
    tag = "Train" if train else "Eval"
    feats = [fheads[i].bottleneck(fx[i], B, train)[0] for i in range(n)]
    for one_hot in (False, True):
        ys, betas = [], []
        for m in range(B):
            ph = [feats[i][m] for i in range(n)]
            o = [[fheads[j].classify(ph[i]) for j in range(n)] for i in range(n)]
            _, beta, _, yfin = bi_aten(ph, o, w_o, w_f, w_qf, one_hot)
            ys.extend(yfin)
            betas.extend(beta)
        mode = "OneHot" if one_hot else "Learned"
        emit(f"kFull{tag}{mode}Y", ys)
        emit(f"kFull{tag}{mode}Beta", betas)

# --- objectives --------------------------------------------------------------
logits = [mpf(v) for v in draw(2, 3, scale=2)]
emit("kCeLogits", logits)
eps = mpf("0.1")
labels = [0, 2]
total = mpf(0)
for m in range(2):
    row = logits[m * 3:(m + 1) * 3]
    p = softmax(row)
    for c in range(3):
        q = (1 - eps) * (1 if c == labels[m] else 0) + eps / 3
        total -= q * log(p[c])
emit("kCeLoss", [total / 2])


def im(probs):
    b = len(probs)
    C = len(probs[0])
    ent = -sum(sum(p * log(p) for p in row) for row in probs) / b
    pbar = [sum(row[c] for row in probs) / b for c in range(C)]
    div = -sum(p * log(p) for p in pbar)
    return ent - div, ent, div


# im loss on random logits, 5 x 4
lg = draw(5, 4, scale=3)
emit("kImLogits", lg)
probs = [softmax([mpf(v) for v in lg[r * 4:(r + 1) * 4]]) for r in range(5)]
emit("kImLoss", im(probs))

# intra objective: two domains' ytilde, 3 x 3 each
ya = draw(3, 3, scale=2)
yb = draw(3, 3, scale=2)
emit("kIntraObjA", ya)
emit("kIntraObjB", yb)
emit("kIntraObj", [sum(im([softmax([mpf(v) for v in y[r * 3:(r + 1) * 3]]) for r in range(3)])[0]
                       for y in (ya, yb))])

# --- centroids: 5 samples, 2 classes, 1 domain, d_k = 3 ---------------------
cf = draw(5, 3)
cp = [softmax([mpf(v) for v in row]) for row in np.array(draw(5, 2, scale=2)).reshape(5, 2).tolist()]
emit("kCentroidFeat", cf)
emit("kCentroidProbs", flatten(cp))
cent = []
for c in range(2):
    mass = sum(cp[m][c] for m in range(5))
    cent.extend([sum(cp[m][c] * mpf(cf[m * 3 + k]) for m in range(5)) / mass for k in range(3)])
emit("kCentroids", cent)

# --- pseudo labels: 8 samples, 3 classes, 2 domains, d_k = 4 ----------------
N, C, n, d_k = 8, 3, 2, 4
pf = [draw(N, d_k, scale=2) for _ in range(n)]
plogits = draw(N, C, scale=3)
pbeta_logits = draw(N, n)
for i in range(n):
    emit(f"kPseudoFeat{i}", pf[i])
pp = [softmax([mpf(v) for v in plogits[m * C:(m + 1) * C]]) for m in range(N)]
pb = [softmax([mpf(v) for v in pbeta_logits[m * n:(m + 1) * n]]) for m in range(N)]
emit("kPseudoProbs", flatten(pp))
emit("kPseudoBeta", flatten(pb))
mu = [[[sum(pp[m][c] * mpf(pf[i][m * d_k + k]) for m in range(N)) / sum(pp[m][c] for m in range(N))
        for k in range(d_k)] for c in range(C)] for i in range(n)]
labels = []
margins = []
for m in range(N):
    feat = [sum(pb[m][i] * mpf(pf[i][m * d_k + k]) for i in range(n)) for k in range(d_k)]
    scores = []
    for c in range(C):
        cen = [sum(pb[m][i] * mu[i][c][k] for i in range(n)) for k in range(d_k)]
        scores.append(cosine(feat, cen))
    best = max(range(C), key=lambda c: (scores[c], -c))
    labels.append(best)
    ordered = sorted(scores, reverse=True)
    margins.append(ordered[0] - ordered[1])
assert min(margins) > mpf("1e-6"), "pseudo-label instance too close to a tie"
emit_int("kPseudoLabels", labels)

# --- SGD: two momentum steps on a 2x2 tensor --------------------------------
theta = [mpf(v) for v in draw(4)]
g1 = [mpf(v) for v in draw(4)]
g2 = [mpf(v) for v in draw(4)]
emit("kSgdTheta0", theta)
emit("kSgdGrad1", g1)
emit("kSgdGrad2", g2)
lr, mu_ = mpf("0.05"), mpf("0.9")
v = [mpf(0)] * 4
for g in (g1, g2):
    v = [mu_ * vv + gg for vv, gg in zip(v, g)]
    theta = [t - lr * vv for t, vv in zip(theta, v)]
emit("kSgdTheta2", theta)

print("#pragma once")
print("// Generated by tests/oracles/make_oracles.py; do not edit.")
print("#include <cstdint>")
print("#include <vector>")
print("namespace oracle {")
for line in out:
    print(line)
print("}  // namespace oracle")
