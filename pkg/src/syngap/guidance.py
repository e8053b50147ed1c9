"""The two guidance mechanisms for training on synthetic data.

Pretrained guidance regularizes the trainee so that the pairwise distance
matrix of its batch features keeps a similar distribution to the one a frozen
prior model produces for the same batch. Real guidance is gradient surgery:
synthetic-batch gradients are projected to be at most perpendicular to the
concurrent real-batch gradient before the two are linearly combined.

All functions here are pure; distance matrices are plain n-by-n arrays with a
zero diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import Matrix, row_softmax

METRICS = ("cosine", "euclidean")
SIMILARITIES = ("L1", "KL")

_NORM_EPS = 1e-12


@dataclass(frozen=True)
class PgConfig:
    """Settings for the distance-distribution regularizer."""

    metric: str = "cosine"
    similarity: str = "KL"
    temperature: float = 0.1
    lambda3: float = 1.0

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}, expected one of {METRICS}")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"unknown similarity {self.similarity!r}, expected one of {SIMILARITIES}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.lambda3 < 0:
            raise ValueError(f"lambda3 must be nonnegative, got {self.lambda3}")


@dataclass(frozen=True)
class RgConfig:
    """Weights for combining real and projected synthetic gradients.

    The default lambda1=0 uses the real batches only to constrain the
    synthetic gradient, never to update the model directly; that regime works
    best when real samples are far scarcer than synthetic ones. Setting
    ``project=False`` keeps the linear combination but skips the projection,
    which is useful as an ablation.
    """

    lambda1: float = 0.0
    lambda2: float = 1.0
    project: bool = True

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError(f"lambdas must be nonnegative, got {self.lambda1}, {self.lambda2}")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ValueError("lambda1 and lambda2 cannot both be zero")


def pairwise_distance(features: Matrix, metric: str = "cosine") -> Matrix:
    """All-pairs distance matrix of the feature rows.

    cosine distance is 1 - cos(f_i, f_j); euclidean is the L2 norm of the
    difference. The diagonal is exactly zero.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError(f"need a 2-D feature matrix with at least 2 rows, got shape {f.shape}")
    n = f.shape[0]
    if metric == "cosine":
        norms = np.linalg.norm(f, axis=1)
        small = norms <= _NORM_EPS
        if small.any():
            raise ValueError(f"cosine distance undefined: feature row {int(np.argmax(small))} has zero norm")
        u = f / norms[:, None]
        d = 1.0 - np.clip(u @ u.T, -1.0, 1.0)
    elif metric == "euclidean":
        diff = f[:, None, :] - f[None, :, :]
        d = np.sqrt((diff * diff).sum(axis=2))
    else:
        raise ValueError(f"unknown metric {metric!r}, expected one of {METRICS}")
    np.fill_diagonal(d, 0.0)
    return d


def _check_square_pair(d_p: Matrix, d_u: Matrix) -> int:
    d_p = np.asarray(d_p)
    d_u = np.asarray(d_u)
    if d_p.ndim != 2 or d_p.shape[0] != d_p.shape[1]:
        raise ValueError(f"distance matrix must be square, got shape {d_p.shape}")
    if d_p.shape != d_u.shape:
        raise ValueError(f"distance matrices disagree: {d_p.shape} vs {d_u.shape}")
    return d_p.shape[0]


def _offdiag(d: Matrix) -> Matrix:
    """Drop the diagonal: row i keeps its n-1 other entries, order preserved."""
    n = d.shape[0]
    mask = ~np.eye(n, dtype=bool)
    return d[mask].reshape(n, n - 1)


def _scatter_offdiag(rows: Matrix) -> Matrix:
    n = rows.shape[0]
    out = np.zeros((n, n))
    mask = ~np.eye(n, dtype=bool)
    out[mask] = rows.ravel()
    return out


def pg_loss(
    d_p: Matrix, d_u: Matrix, similarity: str = "KL", temperature: float = 0.1
) -> tuple[float, Matrix]:
    """Mismatch between two distance matrices, and its gradient w.r.t. d_u.

    L1 sums |d_p - d_u| over the off-diagonal entries, with subgradient 0 at
    equality. KL turns each row's off-diagonal entries into a probability
    vector (softmax of the negated distances at the given temperature) and
    sums KL(q_u || q_p) over rows, so the trainee's row distributions are
    pulled toward the prior's. The returned gradient matrix is zero on the
    diagonal.
    """
    n = _check_square_pair(d_p, d_u)
    d_p = np.asarray(d_p, dtype=np.float64)
    d_u = np.asarray(d_u, dtype=np.float64)

    if similarity == "L1":
        r = d_u - d_p
        np.fill_diagonal(r, 0.0)
        return float(np.abs(r).sum()), np.sign(r)

    if similarity == "KL":
        if n < 3:
            raise ValueError(
                "KL similarity needs n >= 3: KL over a single off-diagonal entry is identically zero"
            )
        p_rows = _offdiag(d_p)
        u_rows = _offdiag(d_u)
        q = row_softmax(-u_rows, temperature)
        p = row_softmax(-p_rows, temperature)
        # log-softmax forms stay finite even when q or p underflow to 0
        zq = -u_rows / temperature
        zp = -p_rows / temperature
        log_q = zq - zq.max(axis=1, keepdims=True)
        log_q = log_q - np.log(np.exp(log_q).sum(axis=1, keepdims=True))
        log_p = zp - zp.max(axis=1, keepdims=True)
        log_p = log_p - np.log(np.exp(log_p).sum(axis=1, keepdims=True))
        ratio = log_q - log_p
        terms = np.where(q > 0.0, q * ratio, 0.0)
        row_kl = terms.sum(axis=1)
        # d KL(q||p) / d u_k with u = -d_u/temperature, then chain factor -1/temperature
        grad_rows = np.where(q > 0.0, q * (ratio - row_kl[:, None]), 0.0) * (-1.0 / temperature)
        return float(row_kl.sum()), _scatter_offdiag(grad_rows)

    raise ValueError(f"unknown similarity {similarity!r}, expected one of {SIMILARITIES}")


def pg_feature_grad(f_p: Matrix, f_u: Matrix, config: PgConfig) -> tuple[float, Matrix]:
    """Scaled distance-distribution loss and its gradient w.r.t. the trainee features.

    The prior features f_p are treated as constants (the prior model is
    frozen); f_p and f_u may have different widths but must describe the same
    batch. Both the loss and the gradient carry the lambda3 factor.
    """
    f_p = np.asarray(f_p, dtype=np.float64)
    f_u = np.asarray(f_u, dtype=np.float64)
    if f_p.shape[0] != f_u.shape[0]:
        raise ValueError(f"batch size mismatch: f_p has {f_p.shape[0]} rows, f_u has {f_u.shape[0]}")
    if config.lambda3 == 0.0:
        return 0.0, np.zeros_like(f_u)

    d_p = pairwise_distance(f_p, config.metric)
    d_u = pairwise_distance(f_u, config.metric)
    raw, dl_ddu = pg_loss(d_p, d_u, config.similarity, config.temperature)

    # d_u[i,j] depends on rows i and j only and the metric is symmetric in
    # them, so fold the two gradient paths into one symmetric weight matrix.
    w = dl_ddu + dl_ddu.T
    if config.metric == "euclidean":
        safe = np.where(d_u > 0.0, d_u, 1.0)
        ratio = np.where(d_u > 0.0, w / safe, 0.0)
        grad = ratio.sum(axis=1)[:, None] * f_u - ratio @ f_u
    else:
        norms = np.linalg.norm(f_u, axis=1)
        u = f_u / norms[:, None]
        cos = np.clip(u @ u.T, -1.0, 1.0)
        grad = -(w @ u - (w * cos).sum(axis=1)[:, None] * u) / norms[:, None]
    return config.lambda3 * raw, config.lambda3 * grad


def project_gradient(g_f: np.ndarray, g_r: np.ndarray) -> np.ndarray:
    """Make the synthetic gradient at most perpendicular to the real one.

    If g_f . g_r < 0 the component of g_f along g_r is removed:
    g_f - (g_f.g_r / g_r.g_r) g_r; otherwise g_f passes through unchanged.
    """
    g_f = np.asarray(g_f, dtype=np.float64)
    g_r = np.asarray(g_r, dtype=np.float64)
    if g_f.ndim != 1 or g_r.ndim != 1:
        raise ValueError("gradients must be flat vectors")
    if g_f.shape != g_r.shape:
        raise ValueError(f"gradient length mismatch: {g_f.shape[0]} vs {g_r.shape[0]}")
    if g_f.shape[0] == 0:
        raise ValueError("gradients must have nonzero length")
    dot = float(g_f @ g_r)
    if dot >= 0.0:
        return g_f
    return g_f - (dot / float(g_r @ g_r)) * g_r


def combine_gradients(g_r: np.ndarray, g_f_new: np.ndarray, config: RgConfig) -> np.ndarray:
    """Weighted update direction: lambda1 * g_r + lambda2 * g_f_new."""
    g_r = np.asarray(g_r, dtype=np.float64)
    g_f_new = np.asarray(g_f_new, dtype=np.float64)
    if g_r.shape != g_f_new.shape:
        raise ValueError(f"gradient length mismatch: {g_r.shape} vs {g_f_new.shape}")
    return config.lambda1 * g_r + config.lambda2 * g_f_new
