"""Pure numpy implementations of the gradient kernels."""

import numpy as np


def _row_norms(g: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", g, g)
    norms = np.sqrt(sq)
    bad = ~np.isfinite(sq)
    if bad.any():
        scale = np.abs(g[bad]).max(axis=1)
        norms[bad] = scale * np.sqrt(np.einsum("ij,ij->i", g[bad] / scale[:, None], g[bad] / scale[:, None]))
    return norms


def clip_rows(g: np.ndarray, clip_norm: float) -> np.ndarray:
    finite = np.isfinite(g).all(axis=1)
    if not finite.all():
        raise ValueError(f"non-finite gradient entry at token {int(np.argmin(finite))}")
    norms = _row_norms(g)
    over = norms > clip_norm
    factors = np.ones(g.shape[0])
    factors[over] = clip_norm / norms[over]
    g[over] *= factors[over, None]
    return factors


def softmax_xent(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    rows = np.arange(logits.shape[0])
    m = logits.max(axis=1, keepdims=True)
    zt = logits[rows, targets]
    np.subtract(logits, m, out=logits)
    np.exp(logits, out=logits)
    s = logits.sum(axis=1, keepdims=True)
    losses = np.log(s[:, 0]) + m[:, 0] - zt
    np.divide(logits, s, out=logits)
    logits[rows, targets] -= 1.0
    return losses


def segment_sq_norms(x, r, wr, tokens, seg):
    lengths = np.diff(seg)
    if (lengths == 1).all():
        xx = np.einsum("ij,ij->i", x, x)
        rr = np.einsum("ij,ij->i", r, r)
        ww = np.einsum("ij,ij->i", wr, wr)
        return xx * rr + rr + ww
    out = np.empty(len(lengths))
    for k in range(len(lengths)):
        a, b = seg[k], seg[k + 1]
        gx = x[a:b] @ x[a:b].T
        gr = r[a:b] @ r[a:b].T
        gw = wr[a:b] @ wr[a:b].T
        same = tokens[a:b, None] == tokens[None, a:b]
        out[k] = max(float((gx * gr).sum() + gr.sum() + gw[same].sum()), 0.0)
    return out


def scatter_add_rows(out, idx, rows, weights) -> None:
    np.add.at(out, idx, weights[:, None] * rows)
