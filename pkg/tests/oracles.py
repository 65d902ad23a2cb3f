"""Slow, obviously-correct reference computations used only by the tests."""
import numpy as np

from cbsmseg.tensor import Tensor


def direct_conv2d(x, w, b, stride=1, pad=0):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b_ in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[b_, ic, i * stride + di, j * stride + dj] * w[oc, ic, di, dj]
                    out[b_, oc, i, j] = acc
    return out


def direct_conv_transpose2x2(x, w, b):
    """Scatter form: every input pixel paints a 2x2 patch."""
    n, c, h, wd = x.shape
    _, o, _, _ = w.shape
    out = np.zeros((n, o, 2 * h, 2 * wd)) + b[None, :, None, None]
    for b_ in range(n):
        for ic in range(c):
            for i in range(h):
                for j in range(wd):
                    for oc in range(o):
                        for di in range(2):
                            for dj in range(2):
                                out[b_, oc, 2 * i + di, 2 * j + dj] += x[b_, ic, i, j] * w[ic, oc, di, dj]
    return out


def window_scan_maxpool(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for a in range(n):
        for ch in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[a, ch, i, j] = max(x[a, ch, 2 * i + di, 2 * j + dj] for di in range(2) for dj in range(2))
    return out


def loop_confusion(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(np.asarray(pred).ravel().tolist(), np.asarray(gt).ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def numerical_grad(f, arr, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place, restored)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / scale


def gradcheck(fn, leaves, rng, h=1e-5):
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` maps the leaf tensors to an output tensor; the scalar checked is
    sum(output * R) for a fixed random R, so every output entry contributes.
    """
    out = fn(*leaves)
    weights = rng.standard_normal(out.shape)
    for t in leaves:
        t.grad = None
    (out * Tensor(weights)).sum().backward()
    worst = 0.0
    for t in leaves:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()

        def scalar():
            return float(np.sum(fn(*leaves).data * weights))

        numeric = numerical_grad(scalar, t.data, h)
        worst = max(worst, rel_error(analytic, numeric))
    return worst
