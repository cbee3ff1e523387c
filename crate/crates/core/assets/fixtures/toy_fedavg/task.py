"""Two-class point clouds and a logistic-regression model, standard library only."""

import math

A = 6364136223846793005
C = 1442695040888963407
MASK = (1 << 64) - 1


class Lcg:
    def __init__(self, seed):
        self.state = seed & MASK

    def uniform(self):
        self.state = (A * self.state + C) & MASK
        return (self.state >> 11) / float(1 << 53)


def make_points(seed, n, spread=3.0):
    rng = Lcg(seed)
    points = []
    for i in range(n):
        y = i % 2
        center = 1.0 if y else -1.0
        x1 = center + (rng.uniform() - 0.5) * spread
        x2 = center + (rng.uniform() - 0.5) * spread
        points.append(((x1, x2), y))
    return points


def get_data(partition_id, num_partitions, seed):
    base = seed * 1000 + partition_id * 10
    return make_points(base + 1, 40), make_points(base + 2, 20)


def get_model():
    return [0.0, 0.0, 0.0]


def sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def loss_and_grad(params, data):
    w1, w2, b = params
    loss = 0.0
    g = [0.0, 0.0, 0.0]
    eps = 1e-12
    for (x1, x2), y in data:
        p = sigmoid(w1 * x1 + w2 * x2 + b)
        loss -= y * math.log(p + eps) + (1 - y) * math.log(1.0 - p + eps)
        d = p - y
        g[0] += d * x1
        g[1] += d * x2
        g[2] += d
    n = float(len(data))
    return loss / n, [v / n for v in g]


def train(params, data, epochs, lr):
    params = list(params)
    loss = 0.0
    for _ in range(epochs):
        loss, g = loss_and_grad(params, data)
        params = [p - lr * gi for p, gi in zip(params, g)]
    return params, loss


def test(params, data):
    loss, _ = loss_and_grad(params, data)
    w1, w2, b = params
    correct = sum(1 for (x1, x2), y in data if (w1 * x1 + w2 * x2 + b >= 0) == (y == 1))
    return loss, correct / float(len(data))
