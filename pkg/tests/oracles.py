"""Independent reference computations shared by the unit and acceptance suites."""
import numpy as np

from cascade_kd.numcore import Tensor, backward, cross_entropy, dense_forward, kd_loss, numeric_grad, relu


# central differences resolve about eps * |f| / h ~ 1e-11 absolutely, so entries
# smaller than this floor are compared on that absolute scale
REL_FLOOR = 1e-6


def random_net_grad_error(seed: int) -> float:
    """Largest relative error between analytic and central-difference gradients."""
    rng = np.random.default_rng(seed)
    d_in, h, k, n = rng.integers(2, 6), rng.integers(2, 6), rng.integers(2, 5), rng.integers(2, 5)
    x = Tensor(rng.uniform(-2, 2, (n, d_in)))
    params = [
        Tensor(rng.uniform(-2, 2, (d_in, h)), requires_grad=True),
        Tensor(rng.uniform(-2, 2, h), requires_grad=True),
        Tensor(rng.uniform(-2, 2, (h, k)), requires_grad=True),
        Tensor(rng.uniform(-2, 2, k), requires_grad=True),
    ]
    labels = rng.integers(0, k, n)
    teacher = rng.uniform(-2, 2, (n, k))
    use_kd = seed % 2 == 1

    def loss():
        z = dense_forward(relu(dense_forward(x, params[0], params[1])), params[2], params[3])
        return kd_loss(z, teacher, 2.0) if use_kd else cross_entropy(z, labels)

    backward(loss())
    worst = 0.0
    for p in params:
        num = numeric_grad(lambda: loss().item(), p)
        denom = np.maximum(np.maximum(np.abs(p.grad), np.abs(num)), REL_FLOOR)
        worst = max(worst, float((np.abs(p.grad - num) / denom).max()))
    return worst


def wise_fixture(seed: int, n: int = 40, k: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Two random exits' softmax outputs (2, n, k) and labels."""
    rng = np.random.default_rng(1000 + seed)
    logits = rng.normal(0.0, 2.0, (2, n, k))
    labels = rng.integers(0, k, n)
    # make the exits informative, by different amounts
    logits[0, np.arange(n), labels] += rng.uniform(0, 3)
    logits[1, np.arange(n), labels] += rng.uniform(0, 3)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True), labels


def grid_search_two_exit_loss(probs: np.ndarray, labels: np.ndarray, resolution: float = 0.001) -> tuple[float, float]:
    """Best (loss, beta_1) over beta = (b, 1 - b) on a regular grid."""
    p1 = probs[0, np.arange(len(labels)), labels]
    p2 = probs[1, np.arange(len(labels)), labels]
    best = (np.inf, 0.0)
    for b in np.linspace(0.0, 1.0, int(round(1 / resolution)) + 1):
        mix = np.maximum(b * p1 + (1 - b) * p2, 1e-12)
        loss = float(-np.log(mix).mean())
        if loss < best[0]:
            best = (loss, float(b))
    return best


# Default architecture written out by hand: (in, out) of every dense layer.
# MV input is 3 frames x 16 dims, R and I-frame inputs are 3 x 64; 10 classes;
# IC hidden width is half the tapped block width.
HAND_LAYERS = {
    "mv": {"blocks": [(48, 64), (64, 64), (64, 32), (32, 32)],
           "ics": {1: [(64, 32), (32, 10)], 2: [(64, 32), (32, 10)], 3: [(32, 16), (16, 10)]},
           "fc": (32, 10)},
    "r": {"blocks": [(192, 64), (64, 64), (64, 32), (32, 32)],
          "ics": {1: [(64, 32), (32, 10)], 2: [(64, 32), (32, 10)], 3: [(32, 16), (16, 10)]},
          "fc": (32, 10)},
    "iframe": {"blocks": [(192, 128), (128, 96), (96, 64), (64, 64)],
               "ics": {1: [(128, 64), (64, 10)], 2: [(96, 48), (48, 10)], 3: [(64, 32), (32, 10)]},
               "fc": (64, 10)},
}


def hand_ledger() -> dict[str, int]:
    """Per-component FLOPs: multiply+add per weight, one add per bias, one op per ReLU output."""
    out = {}
    for m, spec in HAND_LAYERS.items():
        for i, (a, b) in enumerate(spec["blocks"], start=1):
            out[f"{m}.block{i}"] = a * b * 2 + b + b
        for j, ((a, h), (h2, k)) in spec["ics"].items():
            out[f"{m}.ic{j}"] = (a * h * 2 + h) + h + (h2 * k * 2 + k)
        a, k = spec["fc"]
        out[f"{m}.fc"] = a * k * 2 + k
    return out


# Cumulative cost of the default R -> MV -> I-frame chain (12 exits), tallied by hand
# from the table above: each block is paid once per modality, each head once.
HAND_CHAIN_COSTS = [29514, 42644, 48190, 50952, 62034, 75164, 80710, 83472, 150682, 185732, 202958, 212568]
