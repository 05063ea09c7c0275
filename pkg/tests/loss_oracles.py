"""Plain-loop reference implementations of the training objectives."""
import math


def scl_loop(emb, labels, tau=1.0):
    n = len(labels)
    total, anchors = 0.0, 0
    for i in range(n):
        positives = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not positives:
            continue
        denom = sum(math.exp(sum(emb[i][k] * emb[j][k] for k in range(len(emb[i]))) / tau)
                    for j in range(n) if j != i)
        acc = 0.0
        for p in positives:
            s = sum(emb[i][k] * emb[p][k] for k in range(len(emb[i]))) / tau
            acc += -(s - math.log(denom))
        total += acc / len(positives)
        anchors += 1
    return total / anchors if anchors else 0.0


def softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def pce_loop(logits, labels):
    return sum(-math.log(max(softmax_row(r)[y], 1e-12)) for r, y in zip(logits, labels)) / len(labels)


def sce_loop(p, q):
    out = 0.0
    for pr, qr in zip(p, q):
        out += -sum(a * math.log(max(b, 1e-12)) for a, b in zip(qr, pr))
        out += -sum(a * math.log(max(b, 1e-12)) for a, b in zip(pr, qr))
    return out / len(p)


def entropy_loop(p):
    return sum(-sum(v * math.log(max(v, 1e-12)) for v in row) for row in p) / len(p)
