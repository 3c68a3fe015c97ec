"""Central finite-difference gradient checking at float64."""

from __future__ import annotations

import numpy as np

from pssl.autodiff import Tensor


def numeric_grad(fn, arrays, index, h=1e-6):
    base = arrays[index]
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = base[i]
        base[i] = old + h
        fp = fn(*[Tensor(a) for a in arrays]).item()
        base[i] = old - h
        fm = fn(*[Tensor(a) for a in arrays]).item()
        base[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric) -> float:
    """max |a - n| scaled by the larger gradient magnitude of the tensor."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(fn, arrays, h=1e-6) -> float:
    """Largest relative error over all inputs of the scalar function ``fn``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    out.backward()
    worst = 0.0
    for k, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(arrays[k])
        worst = max(worst, relative_error(analytic, numeric_grad(fn, arrays, k, h)))
    return worst


def weighted_sum(t: Tensor, seed: int = 99) -> Tensor:
    """Reduce a tensor to a scalar with fixed random weights (exercises every output)."""
    w = np.random.default_rng(seed).normal(size=t.shape)
    return (t * Tensor(w)).sum()


# ----------------------------------------------------------------------------
# kernel cases: name -> (builder(rng) -> arrays, fn(*tensors) -> scalar)
# ----------------------------------------------------------------------------

def _cases():
    from pssl import autodiff as ad

    def n(rng, *shape):
        return rng.normal(size=shape)

    def away_from_zero(rng, *shape):
        x = rng.normal(size=shape)
        return x + np.sign(x) * 0.1

    idx = np.array([2, 0, 2, 1])
    return {
        "add": (lambda r: [n(r, 3, 4), n(r, 4)], lambda a, b: weighted_sum(a + b)),
        "sub": (lambda r: [n(r, 3, 4), n(r, 3, 1)], lambda a, b: weighted_sum(a - b)),
        "mul": (lambda r: [n(r, 3, 4), n(r, 1, 4)], lambda a, b: weighted_sum(a * b)),
        "scale": (lambda r: [n(r, 5)], lambda a: weighted_sum(a * 2.5 / 3.0)),
        "neg": (lambda r: [n(r, 5)], lambda a: weighted_sum(-a)),
        "tanh": (lambda r: [n(r, 4, 3)], lambda a: weighted_sum(ad.tanh(a))),
        "sigmoid": (lambda r: [n(r, 4, 3) * 3], lambda a: weighted_sum(ad.sigmoid(a))),
        "log_sigmoid": (lambda r: [n(r, 6) * 4], lambda a: weighted_sum(ad.log_sigmoid(a))),
        "relu": (lambda r: [away_from_zero(r, 4, 3)], lambda a: weighted_sum(ad.relu(a))),
        "exp": (lambda r: [n(r, 5)], lambda a: weighted_sum(ad.exp(a))),
        "log": (lambda r: [np.abs(n(r, 5)) + 0.5], lambda a: weighted_sum(ad.log(a))),
        "matmul_2d": (lambda r: [n(r, 3, 4), n(r, 4, 2)], lambda a, b: weighted_sum(a @ b)),
        "matmul_batched_weight": (lambda r: [n(r, 2, 3, 4), n(r, 4, 5)], lambda a, b: weighted_sum(a @ b)),
        "matmul_4d": (lambda r: [n(r, 2, 2, 3, 4), n(r, 2, 2, 4, 3)], lambda a, b: weighted_sum(a @ b)),
        "reshape": (lambda r: [n(r, 2, 6)], lambda a: weighted_sum(a.reshape(3, 4))),
        "transpose": (lambda r: [n(r, 2, 3, 4)], lambda a: weighted_sum(a.transpose(2, 0, 1))),
        "getitem_slice": (lambda r: [n(r, 4, 5)], lambda a: weighted_sum(a[1:3, ::2])),
        "getitem_fancy": (lambda r: [n(r, 3, 4)], lambda a: weighted_sum(a[idx])),
        "concat": (lambda r: [n(r, 2, 3), n(r, 4, 3)], lambda a, b: weighted_sum(ad.concat([a, b], axis=0))),
        "stack": (lambda r: [n(r, 3), n(r, 3)], lambda a, b: weighted_sum(ad.stack([a, b], axis=1))),
        "embedding": (lambda r: [n(r, 5, 3)],
                      lambda w: weighted_sum(ad.embedding(w, np.array([[1, 4, 1], [3, 2, 0]]), padding_idx=None))),
        "sum_axis": (lambda r: [n(r, 3, 4)], lambda a: weighted_sum(a.sum(axis=1))),
        "mean_axis": (lambda r: [n(r, 3, 4)], lambda a: weighted_sum(a.mean(axis=0, keepdims=True))),
        "softmax": (lambda r: [n(r, 3, 5)], lambda a: weighted_sum(ad.softmax(a, axis=-1))),
        "logsumexp": (lambda r: [n(r, 3, 5)], lambda a: weighted_sum(ad.logsumexp(a, axis=-1))),
        "layer_norm": (lambda r: [n(r, 3, 6), n(r, 6), n(r, 6)],
                       lambda x, g, b: weighted_sum(ad.layer_norm(x, g, b))),
        "cosine": (lambda r: [n(r, 4, 5), n(r, 4, 5)], lambda a, b: weighted_sum(ad.cosine(a, b))),
        "cosine_matrix": (lambda r: [n(r, 3, 5), n(r, 4, 5)],
                          lambda a, b: weighted_sum(ad.cosine_matrix(a, b))),
    }


KERNEL_CASES = _cases()


def kernel_error(name: str, seed: int) -> float:
    build, fn = KERNEL_CASES[name]
    return check_gradients(fn, build(np.random.default_rng(seed)))


# ----------------------------------------------------------------------------
# composed encoders: FD on a random sample of parameter coordinates
# ----------------------------------------------------------------------------

def _central(loss_fn, flat, p, h):
    old = flat[p]
    flat[p] = old + h
    fp = loss_fn().item()
    flat[p] = old - h
    fm = loss_fn().item()
    flat[p] = old
    return (fp - fm) / (2 * h)


def _smooth_difference(loss_fn, flat, p, h, analytic):
    """Central difference, shrinking the step when it straddles a ReLU kink.

    Only consulted on a mismatch: two steps that disagree mean the interval
    crosses a non-differentiable point, and the smaller one lands on a
    single smooth piece.
    """
    coarse = _central(loss_fn, flat, p, h)
    if abs(coarse - analytic) <= 1e-6 * max(1.0, abs(coarse)):
        return coarse
    fine = _central(loss_fn, flat, p, h / 100)
    if abs(coarse - fine) <= 1e-3 * max(1.0, abs(coarse)):
        return coarse
    return fine


def sampled_param_error(loss_fn, store, rng, per_tensor: int = 3, h: float = 1e-6) -> float:
    """Relative error of analytic vs central-difference gradients on sampled coordinates.

    ``loss_fn()`` recomputes the scalar loss from the current parameter values.
    """
    store.zero_grad()
    loss_fn().backward()
    analytic, numeric = [], []
    for name, t in store.items():
        if not t.requires_grad:
            continue
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        for p in picks:
            analytic.append(g.reshape(-1)[p])
            numeric.append(_smooth_difference(loss_fn, flat, p, h, analytic[-1]))
    store.zero_grad()
    return relative_error(np.array(analytic), np.array(numeric))


def tiny_model(seed: int, vocab_size: int = 12):
    from pssl.encoders import Model, ModelConfig
    cfg = ModelConfig(vocab_size=vocab_size, emb_dim=4, hidden=6, heads=2, layers=1, ff_dim=8,
                      mlp_units=4, max_sentence_len=6, max_long=5, max_short=3)
    return Model.create(cfg, seed=seed, dtype=np.float64)


def sentence_encoder_error(seed: int) -> float:
    rng = np.random.default_rng(seed)
    model = tiny_model(seed)
    ids = [list(rng.integers(3, 12, size=rng.integers(1, 6))) for _ in range(3)]
    w = rng.normal(size=(3, model.cfg.hidden))

    def loss():
        out, _ = model.encode_sentences(ids)
        return (out * Tensor(w)).sum()

    return sampled_param_error(loss, model.store, rng)


def sequence_encoder_error(seed: int) -> float:
    from pssl.encoders import SeqItem
    rng = np.random.default_rng(seed)
    model = tiny_model(seed)
    ids = [list(rng.integers(3, 12, size=rng.integers(1, 6))) for _ in range(6)]
    items = [SeqItem((0, 1, 2), (3,), 4), SeqItem((), (5, 0), 1), SeqItem((2, 4), (), None)]
    w = rng.normal(size=(len(items), model.cfg.hidden))

    def loss():
        vec, _ = model.encode_sentences(ids)
        return (model.encode_sequences(vec, items) * Tensor(w)).sum()

    return sampled_param_error(loss, model.store, rng)
