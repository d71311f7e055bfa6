"""Central finite-difference gradient checks for the tensor engine."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tape, Tensor


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f() wrt x, perturbed in place."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(make_loss, params: dict[str, Tensor], h: float = 1e-5) -> dict[str, float]:
    """Compare tape gradients against finite differences for each named param.

    make_loss must rebuild the same scalar loss on every call (it is
    re-evaluated with perturbed parameter values, outside any tape).
    """
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = make_loss()
        tape.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    errs = {}
    for name, p in params.items():
        num = numeric_gradient(lambda: float(make_loss().data), p.data, h)
        errs[name] = max_rel_error(analytic[name], num)
        p.grad = None
    return errs


def run_op_suite(seed: int, h: float = 1e-5) -> dict[str, float]:
    """Gradient-check every differentiable op on random inputs."""
    rng = Rng(seed)
    errs: dict[str, float] = {}

    def check(name, make_loss, params):
        errs[name] = max(check_gradients(make_loss, params, h).values())

    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2)))
    check("matmul", lambda: T.sum_(T.mul(T.matmul(a, b), w)), {"a": a, "b": b})

    x3 = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w2 = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    wo = Tensor(rng.normal(size=(2, 3, 5)))
    check("matmul_nd_2d", lambda: T.sum_(T.mul(T.matmul(x3, w2), wo)), {"x": x3, "w": w2})

    ba = Tensor(rng.normal(size=(2, 2, 3, 4)), requires_grad=True)
    bb = Tensor(rng.normal(size=(2, 2, 4, 3)), requires_grad=True)
    wb = Tensor(rng.normal(size=(2, 2, 3, 3)))
    check("matmul_batched", lambda: T.sum_(T.mul(T.matmul(ba, bb), wb)), {"a": ba, "b": bb})

    u = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    v = Tensor(rng.normal(size=(4,)), requires_grad=True)
    wu = Tensor(rng.normal(size=(2, 3, 4)))
    check("add_broadcast", lambda: T.sum_(T.mul(T.add(u, v), wu)), {"u": u, "v": v})
    check("mul_broadcast", lambda: T.sum_(T.mul(T.mul(u, v), wu)), {"u": u, "v": v})
    check("sub", lambda: T.sum_(T.mul(T.sub(u, v), wu)), {"u": u, "v": v})

    s = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    ws = Tensor(rng.normal(size=(3, 5)))
    check("softmax", lambda: T.sum_(T.mul(T.softmax(s, axis=-1), ws)), {"s": s})
    mbias = np.where(rng.random((3, 5)) > 0.3, 0.0, -1e9)
    check("masked_softmax",
          lambda: T.sum_(T.mul(T.masked_softmax(s, mbias, 0.7), ws)), {"s": s})

    xl = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    gn = Tensor(rng.uniform(0.5, 1.5, size=6), requires_grad=True)
    bs = Tensor(rng.normal(size=6), requires_grad=True)
    wl = Tensor(rng.normal(size=(4, 6)))
    check("layer_norm",
          lambda: T.sum_(T.mul(T.layer_norm(xl, gn, bs, eps=1e-8), wl)),
          {"x": xl, "gain": gn, "bias": bs})

    xg = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    wg = Tensor(rng.normal(size=(3, 4)))
    check("gelu", lambda: T.sum_(T.mul(T.gelu(xg), wg)), {"x": xg})
    check("sigmoid", lambda: T.sum_(T.mul(T.sigmoid(xg), wg)), {"x": xg})

    xp = Tensor(rng.uniform(0.2, 3.0, size=(3, 4)), requires_grad=True)
    check("log", lambda: T.sum_(T.mul(T.log(xp), wg)), {"x": xp})

    check("mean", lambda: T.mean(T.mul(xg, wg)), {"x": xg})
    w4 = Tensor(rng.normal(size=4))
    check("sum_axis", lambda: T.sum_(T.mul(T.sum_(xg, axis=0), w4)), {"x": xg})

    xr = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w64 = Tensor(rng.normal(size=(6, 4)))
    check("reshape", lambda: T.sum_(T.mul(T.reshape(xr, (6, 4)), w64)), {"x": xr})
    wt = Tensor(rng.normal(size=(4, 2, 3)))
    check("transpose", lambda: T.sum_(T.mul(T.transpose(xr, (2, 0, 1)), wt)), {"x": xr})
    wi = Tensor(rng.normal(size=(3, 4)))
    check("getitem", lambda: T.sum_(T.mul(T.getitem(xr, (1, slice(None), slice(None))), wi)),
          {"x": xr})

    emb = Tensor(rng.normal(size=(7, 4)), requires_grad=True)
    idx = np.array([[0, 3, 3], [6, 1, 0]])
    we = Tensor(rng.normal(size=(2, 3, 4)))
    check("embedding", lambda: T.sum_(T.mul(T.embedding(emb, idx), we)), {"emb": emb})

    xd = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    wd = Tensor(rng.normal(size=(3, 4)))
    check("dropout", lambda: T.sum_(T.mul(T.dropout(xd, 0.3, Rng(seed + 1)), wd)), {"x": xd})

    lg = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    tgt = np.array([1, -100, 4, 0])
    check("cross_entropy_logits", lambda: T.cross_entropy_logits(lg, tgt), {"logits": lg})

    zb = Tensor(rng.normal(size=6), requires_grad=True)
    yb = (rng.random(6) > 0.5).astype(np.float64)
    check("bce_with_logits", lambda: T.bce_with_logits(zb, yb), {"logits": zb})

    return errs


def run_model_suite(seed: int, h: float = 1e-5) -> dict[str, float]:
    """Gradient-check a full 4-layer model at test size (tiny dims)."""
    from .model import ModelConfig, RiskModel

    cfg = ModelConfig(n_layers=4, hidden=8, n_heads=2, intermediate=12,
                      max_len=6, token_vocab=15, age_vocab=10, year_vocab=5,
                      dropout=0.0)
    model = RiskModel(cfg, Rng(seed))
    rng = Rng(seed + 17)
    n, length = 2, 6
    tokens = rng.integers(0, cfg.token_vocab, size=(n, length))
    ages = rng.integers(192, 192 + cfg.age_vocab, size=(n, length))
    years = rng.integers(1985, 1985 + cfg.year_vocab, size=(n, length))
    mask = np.ones((n, length), dtype=bool)
    mask[1, 4:] = False
    labels = np.array([1.0, 0.0])

    def make_loss():
        logit = model.class_logits(tokens, ages, years, mask, train=False)
        return T.bce_with_logits(logit, labels)

    return check_gradients(make_loss, dict(model.named_parameters()), h)


def run_full_suite(seeds=range(10), h: float = 1e-5) -> dict[str, float]:
    """Op suite on every seed plus the tiny-model check; returns max err per name."""
    worst: dict[str, float] = {}
    for seed in seeds:
        for name, err in run_op_suite(seed, h).items():
            worst[name] = max(worst.get(name, 0.0), err)
    for name, err in run_model_suite(1234, h).items():
        worst[f"model:{name}"] = max(worst.get(f"model:{name}", 0.0), err)
    return worst
