"""Patch transform: image <-> latent grid via an orthonormal PCA basis.

An image is cut into non-overlapping f x f RGB patches (raster order,
symmetric-reflect padding when the size is not a multiple of f).  Each
patch, flattened to 3*f*f values, is projected onto the top-d principal
directions of a training corpus.  The inverse reassembles patches from
coefficients and crops back to the original size.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._binio import f32_bytes, read_exact, u64_digest
from .errors import CorruptDataError, InvalidConfigError, InvalidInputError, UnsupportedVersionError
from .image_io import validate_image

BASIS_MAGIC = b"PQB1"
BASIS_VERSION = 1

# Eigenvalues below this fraction of the dominant one count as rank deficiency.
_RANK_TOL = 1e-10


@dataclass
class TransformBasis:
    """Orthonormal patch basis: d rows spanning the 3*f*f patch space.

    Attributes:
        patch_size: Patch side length f.
        mean: Patch-space mean, shape (3*f*f,).
        components: Orthonormal rows, shape (d, 3*f*f), ordered by
            decreasing explained variance.
        eigenvalues: Per-component variance over the training corpus, (d,).
        rank_deficient: True when the corpus did not span d directions and
            the trailing rows are an arbitrary orthonormal completion.
    """

    patch_size: int
    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rank_deficient: bool = False

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.components = np.asarray(self.components, dtype=np.float64)
        if self.mean.shape != (self.patch_dim,):
            raise InvalidConfigError(
                f"mean has {self.mean.shape[0]} values, patch space needs {self.patch_dim}"
            )
        if self.components.ndim != 2 or self.components.shape[1] != self.patch_dim:
            raise InvalidConfigError("basis rows do not match the patch dimension")

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @property
    def dim(self) -> int:
        return self.components.shape[0]


def extract_patches(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Flatten an image into a (T, 3*f*f) matrix of patches in raster order.

    Images whose sides are not multiples of `patch_size` are padded with a
    symmetric reflection before extraction, so T = ceil(W/f) * ceil(H/f).
    """
    image = validate_image(image)
    if patch_size < 1:
        raise InvalidInputError(f"patch size must be >= 1, got {patch_size}")
    h, w = image.shape[:2]
    f = patch_size
    gh, gw = -(-h // f), -(-w // f)
    pad_y, pad_x = gh * f - h, gw * f - w
    padded = image.astype(np.float64)
    if pad_y or pad_x:
        padded = np.pad(padded, ((0, pad_y), (0, pad_x), (0, 0)), mode="symmetric")
    patches = padded.reshape(gh, f, gw, f, 3).transpose(0, 2, 1, 3, 4)
    return patches.reshape(gh * gw, 3 * f * f)


def fit_basis(patches: np.ndarray, dim: int, seed: int = 0) -> TransformBasis:
    """Fit a mean-centered PCA basis of `dim` components to a patch matrix.

    Deterministic for a fixed input order; `seed` is accepted for interface
    stability but the covariance eigendecomposition needs no randomness
    (degenerate directions are completed deterministically by the solver).
    """
    del seed
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2:
        raise InvalidInputError("patch matrix must be 2-D")
    n, patch_dim = patches.shape
    if dim > patch_dim:
        raise InvalidConfigError(f"cannot fit {dim} components in a {patch_dim}-dim patch space")
    if dim < 1:
        raise InvalidConfigError("need at least one component")
    if n < dim:
        raise InvalidInputError(f"need at least {dim} patches, got {n}")

    f = int(round((patch_dim / 3) ** 0.5))
    if 3 * f * f != patch_dim:
        raise InvalidConfigError(f"patch dimension {patch_dim} is not 3*f*f for integer f")

    mean = patches.mean(axis=0)
    centered = patches - mean
    cov = centered.T @ centered / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:dim]
    eigenvalues = np.maximum(evals[order], 0.0)
    components = evecs[:, order].T.copy()

    # Fix signs so the result does not depend on the solver's conventions.
    flip = components[np.arange(dim), np.argmax(np.abs(components), axis=1)] < 0
    components[flip] *= -1.0

    top = eigenvalues[0] if dim else 0.0
    deficient = bool(eigenvalues[-1] <= max(top * _RANK_TOL, 1e-12)) if dim else False
    return TransformBasis(f, mean, components, eigenvalues, rank_deficient=deficient)


def forward(image: np.ndarray, basis: TransformBasis) -> np.ndarray:
    """Project an image onto the basis, returning a (h, w, d) latent grid."""
    image = validate_image(image)
    h, w = image.shape[:2]
    f = basis.patch_size
    patches = extract_patches(image, f)
    if patches.shape[1] != basis.patch_dim:
        raise InvalidConfigError("basis patch dimension does not match the image patches")
    coeffs = (patches - basis.mean) @ basis.components.T
    gh, gw = -(-h // f), -(-w // f)
    return coeffs.reshape(gh, gw, basis.dim)


def inverse(latents: np.ndarray, basis: TransformBasis, width: int, height: int) -> np.ndarray:
    """Reconstruct a (height, width, 3) uint8 image from a latent grid.

    Pixel values are rounded half-up and clamped to [0, 255]; padding added
    by `extract_patches` is cropped away.
    """
    latents = np.asarray(latents, dtype=np.float64)
    f = basis.patch_size
    gh, gw = -(-height // f), -(-width // f)
    if latents.ndim != 3 or latents.shape[2] != basis.dim:
        raise InvalidConfigError("latent grid depth does not match the basis dimension")
    if latents.shape[:2] != (gh, gw):
        raise InvalidConfigError(
            f"latent grid {latents.shape[:2]} inconsistent with {width}x{height} at f={f}"
        )
    patches = latents.reshape(-1, basis.dim) @ basis.components + basis.mean
    canvas = patches.reshape(gh, gw, f, f, 3).transpose(0, 2, 1, 3, 4).reshape(gh * f, gw * f, 3)
    canvas = canvas[:height, :width]
    return np.clip(np.floor(canvas + 0.5), 0, 255).astype(np.uint8)


def basis_to_bytes(basis: TransformBasis) -> bytes:
    """Serialize: magic, version u8, f u8, d u16 LE, then mean and rows as f32 LE."""
    if basis.patch_size > 0xFF or basis.dim > 0xFFFF:
        raise InvalidConfigError("basis exceeds the file format's field widths")
    header = BASIS_MAGIC + struct.pack("<BBH", BASIS_VERSION, basis.patch_size, basis.dim)
    return header + f32_bytes(basis.mean) + f32_bytes(basis.components)


def basis_id(basis: TransformBasis) -> int:
    return u64_digest(basis_to_bytes(basis))


def basis_from_bytes(data: bytes) -> TransformBasis:
    if data[:4] != BASIS_MAGIC:
        raise CorruptDataError("not a basis file (bad magic)")
    version, f, d = struct.unpack("<BBH", read_exact(data, 4, 4, "basis header"))
    if version != BASIS_VERSION:
        raise UnsupportedVersionError(f"basis file version {version} unsupported")
    patch_dim = 3 * f * f
    mean_raw = read_exact(data, 8, 4 * patch_dim, "basis mean")
    rows_raw = read_exact(data, 8 + 4 * patch_dim, 4 * d * patch_dim, "basis rows")
    mean = np.frombuffer(mean_raw, dtype="<f4").astype(np.float64)
    rows = np.frombuffer(rows_raw, dtype="<f4").astype(np.float64).reshape(d, patch_dim)
    return TransformBasis(f, mean, rows)


def save_basis(path: str | Path, basis: TransformBasis) -> int:
    """Write the basis file and return its 64-bit identity."""
    data = basis_to_bytes(basis)
    Path(path).write_bytes(data)
    return u64_digest(data)


def load_basis(path: str | Path) -> TransformBasis:
    return basis_from_bytes(Path(path).read_bytes())
