from __future__ import annotations

import numpy as np


class SingularMatrixError(np.linalg.LinAlgError):
    pass


def symmetrize(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return 0.5 * (a + a.T)


def psd_repair(a, info: dict | None = None) -> np.ndarray:
    """Symmetrize and clip negative eigenvalues at zero.

    The total clipped magnitude is stored under ``info["psd_clip"]``.
    """
    s = symmetrize(np.atleast_2d(a))
    w, v = np.linalg.eigh(s)
    clip = float(np.sum(np.clip(-w, 0.0, None)))
    if info is not None:
        info["psd_clip"] = info.get("psd_clip", 0.0) + clip
    if clip == 0.0:
        return s
    out = (v * np.clip(w, 0.0, None)) @ v.T
    return symmetrize(out)


def is_psd(a, rtol: float = 1e-10) -> bool:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if not np.allclose(a, a.T, rtol=0, atol=rtol * max(1.0, np.max(np.abs(a)))):
        return False
    w = np.linalg.eigvalsh(symmetrize(a))
    return bool(w.min() >= -rtol * max(1.0, np.max(np.abs(w))))


def ridge_solve(v, rhs, *, ridge: bool = True, info: dict | None = None, cond_limit: float = 1e12) -> np.ndarray:
    """Solve ``v x = rhs``; ridge-regularise a numerically singular ``v``.

    The ridge is ``lambda = 1e-10 * tr(v) / d``; its value is recorded under
    ``info["ridge"]``.
    """
    v = np.atleast_2d(np.asarray(v, dtype=float))
    d = v.shape[0]
    if np.all(np.isfinite(v)) and np.linalg.cond(v) < cond_limit:
        return np.linalg.solve(v, rhs)
    if not ridge:
        raise SingularMatrixError("matrix is singular to working precision")
    lam = 1e-10 * abs(np.trace(v)) / d
    if lam == 0.0 or not np.isfinite(lam):
        raise SingularMatrixError("matrix is singular and has zero trace; ridge fallback impossible")
    if info is not None:
        info["ridge"] = lam
    return np.linalg.solve(v + lam * np.eye(d), rhs)
