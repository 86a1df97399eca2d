"""Central finite-difference probes for network gradients."""
import numpy as np

from frealab import nn

SHAPES = {
    "tiny": [6, 64, 64, 1],
    "feasibility_v": [30, 64, 64, 1],
    "feasibility_q": [32, 64, 64, 1],
    "policy": [30, 256, 256, 2],
}
FD_EPS = 1e-5
REL_TOL = 1e-4


def relative_error(a, b):
    return abs(a - b) / max(abs(a) + abs(b), 1e-8)


def probe_network(sizes, n_probes=100, seed=0, batch=4):
    """Max relative error between backprop and central differences of a random quadratic read-out."""
    rng = np.random.default_rng(seed)
    p = nn.MlpParams.init(sizes, rng, output_gain=1.0)
    p = p.map(lambda a: a + 0.05 * rng.standard_normal(a.shape))
    x = rng.standard_normal((batch, sizes[0]))
    c = rng.standard_normal((batch, sizes[-1]))

    def loss(q):
        y = nn.forward(q, x)
        return float(np.sum(c * y + 0.5 * y * y))

    y = nn.forward(p, x)
    grads = nn.backward(p, x, c + y).arrays()
    arrays = p.arrays()
    worst = 0.0
    for _ in range(n_probes):
        k = int(rng.integers(len(arrays)))
        idx = tuple(int(rng.integers(s)) for s in arrays[k].shape)
        plus, minus = p.copy(), p.copy()
        plus_arr, minus_arr = plus.arrays(), minus.arrays()
        plus_arr[k][idx] += FD_EPS
        minus_arr[k][idx] -= FD_EPS
        fd = (loss(plus) - loss(minus)) / (2 * FD_EPS)
        worst = max(worst, relative_error(grads[k][idx], fd))
    return worst


def probe_input_gradient(sizes, n_probes=100, seed=1):
    rng = np.random.default_rng(seed)
    p = nn.MlpParams.init(sizes, rng)
    x = rng.standard_normal(sizes[0])
    c = rng.standard_normal(sizes[-1])
    g = nn.input_gradient(p, x, c)
    worst = 0.0
    for _ in range(n_probes):
        i = int(rng.integers(sizes[0]))
        e = np.zeros(sizes[0])
        e[i] = FD_EPS
        fd = (c @ nn.forward(p, x + e) - c @ nn.forward(p, x - e)) / (2 * FD_EPS)
        worst = max(worst, relative_error(g[i], fd))
    return worst
