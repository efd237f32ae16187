"""SSIM, PSNR and Frechet distance between Gaussian fits of feature clouds."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .formats import write_csv

logger = logging.getLogger(__name__)

IDENTICAL = "identical"
SSIM_WINDOW = 8


class FidNumericalError(ArithmeticError):
    pass


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0):
    """PSNR in dB, or :data:`IDENTICAL` when the images match exactly."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return IDENTICAL
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a, b, peak: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all stride-1 ``window`` x ``window`` uniform windows and channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < window:
        raise ValueError(f"image {a.shape[:2]} smaller than the {window}x{window} SSIM window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    wa = sliding_window_view(a, (window, window), axis=(0, 1))
    wb = sliding_window_view(b, (window, window), axis=(0, 1))
    mu_a = wa.mean(axis=(-2, -1), keepdims=True)
    mu_b = wb.mean(axis=(-2, -1), keepdims=True)
    da, db = wa - mu_a, wb - mu_b
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    mu_a, mu_b = mu_a[..., 0, 0], mu_b[..., 0, 0]
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# -- matrix square roots -----------------------------------------------------


def sqrtm_eigh(A: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix; tiny negative eigenvalues clip to 0."""
    A = 0.5 * (A + A.T)
    w, V = np.linalg.eigh(A)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def sqrtm_newton_schulz(A: np.ndarray, max_iter: int = 500, tol: float = 1e-15) -> np.ndarray:
    """Coupled Newton-Schulz iteration for the square root of an SPD matrix."""
    A = np.asarray(A, dtype=np.float64)
    norm = np.linalg.norm(A, "fro")
    if norm == 0.0:
        return np.zeros_like(A)
    eye = np.eye(len(A))
    Y, Z = A / norm, eye.copy()
    for _ in range(max_iter):
        T = 0.5 * (3.0 * eye - Z @ Y)
        Y_next, Z = Y @ T, T @ Z
        done = np.linalg.norm(Y_next - Y, "fro") <= tol * max(np.linalg.norm(Y_next, "fro"), 1.0)
        Y = Y_next
        if done:
            break
    return Y * math.sqrt(norm)


SQRTM = {"eigh": sqrtm_eigh, "newton_schulz": sqrtm_newton_schulz}


@dataclass
class FeatureCloud:
    vectors: np.ndarray
    mean: np.ndarray = field(init=False)
    cov: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        X = np.asarray(self.vectors, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"feature cloud needs an (n, dim) array, got {X.shape}")
        if len(X) < 2:
            raise ValueError(f"feature cloud needs n >= 2 vectors, got {len(X)}")
        self.vectors = X
        self.mean = X.mean(axis=0)
        D = X - self.mean
        self.cov = D.T @ D / (len(X) - 1)

    @property
    def n(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def _check_psd(cov: np.ndarray, which: str) -> None:
    lo = float(np.linalg.eigvalsh(0.5 * (cov + cov.T)).min())
    if lo < -1e-6:
        raise FidNumericalError(f"{which} covariance has eigenvalue {lo:.3e} < -1e-6")


def frechet_distance(mu1, cov1, mu2, cov2, method: str = "eigh", clamp: bool = True) -> float:
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    cov1, cov2 = np.atleast_2d(np.asarray(cov1, float)), np.atleast_2d(np.asarray(cov2, float))
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape or cov1.shape != (len(mu1), len(mu1)):
        raise ValueError(f"dimension mismatch: {mu1.shape}/{cov1.shape} vs {mu2.shape}/{cov2.shape}")
    _check_psd(cov1, "first")
    _check_psd(cov2, "second")
    sqrtm = SQRTM[method]
    # tr sqrt(S1 S2) = tr sqrt(S1^1/2 S2 S1^1/2), and the latter is symmetric PSD
    r = sqrtm(cov1)
    inner = r @ cov2 @ r
    inner = 0.5 * (inner + inner.T)
    if method == "eigh":
        tr_sqrt = float(np.sum(np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None))))
    else:
        tr_sqrt = float(np.trace(sqrtm(inner)))
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt)
    return max(value, 0.0) if clamp else value


def fid(real: FeatureCloud, gen: FeatureCloud, method: str = "eigh") -> float:
    if real.dim != gen.dim:
        raise ValueError(f"feature dims differ: {real.dim} vs {gen.dim}")
    return frechet_distance(real.mean, real.cov, gen.mean, gen.cov, method)


# -- embeddings --------------------------------------------------------------


def pixel_embedding(img: np.ndarray, size: int = 8) -> np.ndarray:
    """Block-averaged pixels, flattened in (H, W, C) order; images no larger than ``size`` pass through."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if h > size or w > size:
        if h % size or w % size:
            raise ValueError(f"image {h}x{w} is not divisible into {size}x{size} blocks")
        img = img.reshape(size, h // size, size, w // size, -1).mean(axis=(1, 3))
    return img.reshape(-1)


def embed_images(images: Sequence[np.ndarray], embedder="bank", bank=None) -> FeatureCloud:
    """Embed images into a :class:`FeatureCloud`.

    ``embedder`` is ``"bank"`` (global-average-pooled frozen style bank),
    ``"pixels"`` (block-averaged raw pixels) or any callable mapping one
    (H, W, 3) image to a vector.
    """
    if len(images) < 2:
        raise ValueError(f"need at least 2 images to embed, got {len(images)}")
    if embedder == "bank":
        if bank is None:
            from .network import StyleBank
            bank = StyleBank()
        vectors = bank.pooled(images)
    elif embedder == "pixels":
        vectors = np.stack([pixel_embedding(im) for im in images])
    elif callable(embedder):
        vectors = np.stack([np.asarray(embedder(im), dtype=np.float64) for im in images])
    else:
        raise ValueError(f"unknown embedder {embedder!r}")
    return FeatureCloud(vectors)


def save_embeddings(path, vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors, dtype="<f8")
    n, dim = vectors.shape
    Path(path).write_bytes(f"{n} {dim}\n".encode("ascii") + vectors.tobytes())


def load_embeddings(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    nl = buf.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing header line")
    try:
        n, dim = (int(t) for t in buf[:nl].split())
    except ValueError:
        raise ValueError(f"{path}: header must be 'n dim', got {buf[:nl]!r}") from None
    payload = buf[nl + 1:]
    if len(payload) != n * dim * 8:
        raise ValueError(f"{path}: expected {n * dim * 8} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").reshape(n, dim).astype(np.float64)


# -- reports -----------------------------------------------------------------


@dataclass
class ClusterReport:
    cluster: str
    ssim: float
    psnr: float | str
    fid: float
    pair_ssim: list[float]
    pair_psnr: list[float | str]


def _mean_psnr(values: list) -> float | str:
    finite = [v for v in values if v != IDENTICAL]
    if not finite:
        return IDENTICAL
    return float(np.mean(finite))


def evaluate_cluster(generated: Sequence[np.ndarray], reference: Sequence[np.ndarray],
                     cluster: str = "all", embedder="bank", bank=None,
                     fid_generated: Sequence[np.ndarray] | None = None,
                     fid_reference: Sequence[np.ndarray] | None = None,
                     fid_method: str = "eigh") -> ClusterReport:
    """Paired SSIM/PSNR means plus FID for one cluster.

    FID uses ``fid_generated``/``fid_reference`` when given (unpaired sets),
    else the paired sets. Pairs whose images are identical are excluded from
    the PSNR mean; if all are, the mean is :data:`IDENTICAL`. FID is NaN when
    either set has fewer than two images.
    """
    if len(generated) == 0 or len(reference) == 0:
        raise ValueError("generated and reference sets must be non-empty")
    if len(generated) != len(reference):
        raise ValueError(f"paired sets differ in size: {len(generated)} vs {len(reference)}")
    pair_ssim = [ssim(g, r) for g, r in zip(generated, reference)]
    pair_psnr = [psnr(g, r) for g, r in zip(generated, reference)]
    fg = list(generated if fid_generated is None else fid_generated)
    fr = list(reference if fid_reference is None else fid_reference)
    if len(fg) < 2 or len(fr) < 2:
        logger.warning("cluster %s: FID needs >= 2 images per set, reporting nan", cluster)
        value = float("nan")
    else:
        value = fid(embed_images(fr, embedder, bank), embed_images(fg, embedder, bank), fid_method)
    return ClusterReport(str(cluster), float(np.mean(pair_ssim)), _mean_psnr(pair_psnr), value,
                         pair_ssim, pair_psnr)


REPORT_HEADER = ("metric", "cluster", "value")


def report_rows(reports: Sequence[ClusterReport], overall_fid: float | None = None) -> list[tuple]:
    rows = []
    for metric in ("ssim", "psnr", "fid"):
        rows.extend((metric, r.cluster, getattr(r, metric)) for r in reports)
    if overall_fid is not None:
        rows.append(("fid", "overall", overall_fid))
    return rows


def write_report(path, reports: Sequence[ClusterReport], overall_fid: float | None = None) -> None:
    write_csv(path, REPORT_HEADER, report_rows(reports, overall_fid))


def write_pair_report(path, reports: Sequence[ClusterReport], names: dict[str, list[str]] | None = None) -> None:
    rows = []
    for r in reports:
        labels = (names or {}).get(r.cluster) or [str(i) for i in range(len(r.pair_ssim))]
        rows.extend((r.cluster, lab, s, p) for lab, s, p in zip(labels, r.pair_ssim, r.pair_psnr))
    write_csv(path, ("cluster", "image", "ssim", "psnr"), rows)
