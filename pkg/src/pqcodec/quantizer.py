"""Product quantizer: latent vectors <-> M-tuples of sub-codebook indices.

Each d-dim latent vector is split into M contiguous sub-vectors of d/M
values; every sub-vector is assigned to the nearest of V_s centroids in its
own codebook, so a token costs M*log2(V_s) bits at fixed length while the
implicit composite codebook has V_s^M entries.  Codebooks are trained with
per-subspace batch Lloyd k-means (k-means++ seeding).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._binio import crc32, f32_bytes, read_exact, u64_digest
from .errors import CorruptDataError, InvalidConfigError, InvalidInputError, UnsupportedVersionError

CODEBOOK_MAGIC = b"PQC1"
CODEBOOK_VERSION = 1

_ASSIGN_CHUNK = 4096


@dataclass
class PQCodebook:
    """M sub-codebooks of V_s centroids each.

    Attributes:
        centroids: Array of shape (M, V_s, sub_dim), float64.
        history: Per-subspace training distortion per Lloyd iteration
            (training metadata only; not serialized).
    """

    centroids: np.ndarray
    history: list[list[float]] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 3:
            raise InvalidConfigError("centroids must have shape (M, V_s, sub_dim)")
        if self.num_centroids < 2:
            raise InvalidConfigError("need at least 2 centroids per sub-quantizer")
        if not np.all(np.isfinite(self.centroids)):
            raise InvalidConfigError("centroids must be finite")

    @property
    def num_subspaces(self) -> int:
        return self.centroids.shape[0]

    @property
    def num_centroids(self) -> int:
        return self.centroids.shape[1]

    @property
    def sub_dim(self) -> int:
        return self.centroids.shape[2]

    @property
    def dim(self) -> int:
        return self.num_subspaces * self.sub_dim


def _as_matrix(latents: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    arr = np.asarray(latents, dtype=np.float64)
    if arr.ndim == 3:
        return arr.reshape(-1, arr.shape[2]), arr.shape[:2]
    if arr.ndim == 2:
        return arr, ()
    raise InvalidInputError("latents must be (N, d) or (h, w, d)")


def _nearest(sub: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices of nearest centroids and the squared distances, chunked.

    Distances are exact squared differences so ties resolve to the lowest
    index identically to a brute-force scan.
    """
    n = sub.shape[0]
    idx = np.empty(n, dtype=np.int32)
    d2 = np.empty(n, dtype=np.float64)
    for start in range(0, n, _ASSIGN_CHUNK):
        block = sub[start : start + _ASSIGN_CHUNK]
        dist = ((block[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        best = np.argmin(dist, axis=1)
        idx[start : start + block.shape[0]] = best
        d2[start : start + block.shape[0]] = dist[np.arange(block.shape[0]), best]
    return idx, d2


def _kmeans_pp_init(sub: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = sub.shape[0]
    centers = np.empty((k, sub.shape[1]), dtype=np.float64)
    centers[0] = sub[rng.integers(n)]
    d2 = ((sub - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[j] = sub[rng.integers(n)]
            continue
        centers[j] = sub[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((sub - centers[j]) ** 2).sum(axis=1))
    return centers


def train_pq(
    latents: np.ndarray,
    num_subspaces: int,
    num_centroids: int,
    iterations: int = 25,
    seed: int = 0,
    tol: float = 1e-6,
) -> PQCodebook:
    """Train per-subspace Lloyd k-means codebooks.

    Empty clusters are re-seeded from the currently worst-quantized point,
    which keeps the per-iteration distortion non-increasing.  Stops early
    when the relative distortion change drops below `tol`.

    Args:
        latents: Training vectors, (N, d) or (h, w, d).
        num_subspaces: M; d must be divisible by M.
        num_centroids: V_s centroids per sub-quantizer (>= 2).
        iterations: Maximum Lloyd iterations per subspace.
        seed: Seeds k-means++ and any degenerate re-draws.

    Returns:
        A PQCodebook with `history[m]` holding subspace m's distortion at
        each iteration (mean squared sub-vector distance).
    """
    data, _ = _as_matrix(latents)
    n, d = data.shape
    if num_subspaces < 1 or d % num_subspaces != 0:
        raise InvalidConfigError(f"latent dim {d} not divisible by M={num_subspaces}")
    if num_centroids < 2:
        raise InvalidConfigError("need at least 2 centroids")
    if n < num_centroids:
        raise InvalidInputError(f"need at least {num_centroids} samples, got {n}")

    sub_dim = d // num_subspaces
    rng = np.random.default_rng(seed)
    centroids = np.empty((num_subspaces, num_centroids, sub_dim), dtype=np.float64)
    history: list[list[float]] = []

    for m in range(num_subspaces):
        sub = np.ascontiguousarray(data[:, m * sub_dim : (m + 1) * sub_dim])
        centers = _kmeans_pp_init(sub, num_centroids, rng)
        curve: list[float] = []
        prev = np.inf
        for _ in range(max(1, iterations)):
            assign, d2 = _nearest(sub, centers)
            distortion = float(d2.mean())
            curve.append(distortion)

            counts = np.bincount(assign, minlength=num_centroids)
            sums = np.zeros_like(centers)
            np.add.at(sums, assign, sub)
            nonempty = counts > 0
            centers[nonempty] = sums[nonempty] / counts[nonempty, None]

            empties = np.flatnonzero(~nonempty)
            if empties.size:
                worst = np.argsort(-d2, kind="stable")[: empties.size]
                centers[empties] = sub[worst]

            if prev < np.inf and prev > 0 and abs(prev - distortion) <= tol * prev:
                break
            if distortion == 0.0:
                break
            prev = distortion
        centroids[m] = centers
        history.append(curve)

    return PQCodebook(centroids, history=history)


def quantize(latents: np.ndarray, codebook: PQCodebook) -> np.ndarray:
    """Map latents to sub-quantizer indices; (h, w, d) -> (h, w, M) int32.

    Per subspace the Euclidean-nearest centroid wins, ties going to the
    smallest index.
    """
    data, grid_shape = _as_matrix(latents)
    if data.shape[1] != codebook.dim:
        raise InvalidConfigError(
            f"latent dim {data.shape[1]} does not match codebook dim {codebook.dim}"
        )
    m_count, sub_dim = codebook.num_subspaces, codebook.sub_dim
    tokens = np.empty((data.shape[0], m_count), dtype=np.int32)
    for m in range(m_count):
        sub = np.ascontiguousarray(data[:, m * sub_dim : (m + 1) * sub_dim])
        tokens[:, m], _ = _nearest(sub, codebook.centroids[m])
    if grid_shape:
        return tokens.reshape(*grid_shape, m_count)
    return tokens


def dequantize(tokens: np.ndarray, codebook: PQCodebook) -> np.ndarray:
    """Concatenate selected sub-centroids; (h, w, M) -> (h, w, d) float64."""
    tokens = np.asarray(tokens)
    if tokens.shape[-1] != codebook.num_subspaces:
        raise InvalidConfigError(
            f"token depth {tokens.shape[-1]} does not match M={codebook.num_subspaces}"
        )
    if tokens.size and (tokens.min() < 0 or tokens.max() >= codebook.num_centroids):
        raise CorruptDataError("sub-quantizer index out of range")
    parts = [codebook.centroids[m][tokens[..., m]] for m in range(codebook.num_subspaces)]
    return np.concatenate(parts, axis=-1)


def quantization_distortion(latents: np.ndarray, codebook: PQCodebook) -> float:
    """Mean squared distance between latents and their PQ reconstruction."""
    data, _ = _as_matrix(latents)
    recon = dequantize(quantize(data, codebook), codebook)
    return float(((data - recon) ** 2).sum(axis=1).mean())


def codebook_to_bytes(codebook: PQCodebook) -> bytes:
    """Serialize: magic, version u8, M u8, V_s u16, sub_dim u16 LE, f32 centroids, CRC32."""
    if codebook.num_subspaces > 0xFF or codebook.num_centroids > 0xFFFF or codebook.sub_dim > 0xFFFF:
        raise InvalidConfigError("codebook exceeds the file format's field widths")
    body = CODEBOOK_MAGIC + struct.pack(
        "<BBHH",
        CODEBOOK_VERSION,
        codebook.num_subspaces,
        codebook.num_centroids,
        codebook.sub_dim,
    )
    body += f32_bytes(codebook.centroids)
    return body + struct.pack("<I", crc32(body))


def codebook_id(codebook: PQCodebook) -> int:
    return u64_digest(codebook_to_bytes(codebook)[:-4])


def codebook_from_bytes(data: bytes) -> PQCodebook:
    if data[:4] != CODEBOOK_MAGIC:
        raise CorruptDataError("not a codebook file (bad magic)")
    version, m, v, sub_dim = struct.unpack("<BBHH", read_exact(data, 4, 6, "codebook header"))
    if version != CODEBOOK_VERSION:
        raise UnsupportedVersionError(f"codebook file version {version} unsupported")
    raw = read_exact(data, 10, 4 * m * v * sub_dim, "codebook centroids")
    (stored_crc,) = struct.unpack("<I", read_exact(data, 10 + len(raw), 4, "codebook CRC"))
    if stored_crc != crc32(data[: 10 + len(raw)]):
        raise CorruptDataError("codebook CRC mismatch")
    centroids = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(m, v, sub_dim)
    return PQCodebook(centroids)


def save_codebook(path: str | Path, codebook: PQCodebook) -> int:
    data = codebook_to_bytes(codebook)
    Path(path).write_bytes(data)
    return u64_digest(data[:-4])


def load_codebook(path: str | Path) -> PQCodebook:
    return codebook_from_bytes(Path(path).read_bytes())
