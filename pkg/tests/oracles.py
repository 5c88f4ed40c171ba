"""Independent scalar-loop reference implementations used as test oracles.

Deliberately naive: plain Python floats and explicit loops, sharing no code
with the package under test.
"""
import math


def matmul(a, b):
    m, k, n = len(a), len(b), len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(n)] for i in range(m)]


def softmax_row(row):
    mx = max(row)
    e = [math.exp(v - mx) for v in row]
    s = sum(e)
    return [v / s for v in e]


def conv2d_nchw(x, w, b, stride):
    """x[n][c][h][w], w[o][c][k][k]; zero padding k//2; returns out[n][o][ho][wo]."""
    n_img, c_in, h, wd = len(x), len(x[0]), len(x[0][0]), len(x[0][0][0])
    c_out, k = len(w), len(w[0][0])
    p = k // 2
    ho = (h + 2 * p - k) // stride + 1
    wo = (wd + 2 * p - k) // stride + 1
    out = []
    for n in range(n_img):
        maps = []
        for o in range(c_out):
            rows = []
            for y in range(ho):
                cols = []
                for xx in range(wo):
                    acc = b[o]
                    for c in range(c_in):
                        for i in range(k):
                            for j in range(k):
                                yy, xj = y * stride + i - p, xx * stride + j - p
                                if 0 <= yy < h and 0 <= xj < wd:
                                    acc += x[n][c][yy][xj] * w[o][c][i][j]
                    cols.append(acc)
                rows.append(cols)
            maps.append(rows)
        out.append(maps)
    return out


def _dot(u, v):
    return sum(a * b for a, b in zip(u, v))


def supcon(z, labels, tau, unlabeled=-1):
    """Supervised contrastive loss averaged over 2N anchors; rows 2k, 2k+1 pair up."""
    m = len(z)
    view_label = [labels[i // 2] for i in range(m)]
    total = 0.0
    for i in range(m):
        others = [a for a in range(m) if a != i]
        denom = sum(math.exp(_dot(z[i], z[a]) / tau) for a in others)
        partner = i + 1 if i % 2 == 0 else i - 1
        positives = []
        for p in others:
            if p == partner:
                positives.append(p)
            elif view_label[i] != unlabeled and view_label[p] == view_label[i]:
                positives.append(p)
        acc = 0.0
        for p in positives:
            acc += math.log(math.exp(_dot(z[i], z[p]) / tau) / denom)
        total += -acc / len(positives)
    return total / m


def nt_xent(z, tau):
    """SimCLR NT-Xent with cosine similarity, mean over both orderings of each pair."""
    m = len(z)

    def sim(i, j):
        return _dot(z[i], z[j]) / (math.sqrt(_dot(z[i], z[i])) * math.sqrt(_dot(z[j], z[j])))

    def pair_loss(i, j):
        num = math.exp(sim(i, j) / tau)
        den = sum(math.exp(sim(i, k) / tau) for k in range(m) if k != i)
        return -math.log(num / den)

    total = 0.0
    for k in range(m // 2):
        a, b = 2 * k, 2 * k + 1
        total += pair_loss(a, b) + pair_loss(b, a)
    return total / m


def relation(a):
    n = len(a)
    g = [[_dot(a[i], a[j]) for j in range(n)] for i in range(n)]
    out = []
    for row in g:
        norm = math.sqrt(sum(v * v for v in row))
        out.append([v / norm for v in row] if norm >= 1e-12 else list(row))
    return out


def src(student, teacher):
    n = len(student)
    rs, rt = relation(student), relation(teacher)
    return sum((rs[i][j] - rt[i][j]) ** 2 for i in range(n) for j in range(n)) / n


def mse(pred, target):
    n = len(pred)
    return sum((p - t) ** 2 for pr, tr in zip(pred, target) for p, t in zip(pr, tr)) / n


def auroc_pairs(scores, positives):
    pos = [s for s, y in zip(scores, positives) if y]
    neg = [s for s, y in zip(scores, positives) if not y]
    hits = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                hits += 1.0
            elif p == q:
                hits += 0.5
    return hits / (len(pos) * len(neg))
