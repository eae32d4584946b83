"""Probability models feeding the range coder.

Stage 1 is coded with a smoothed marginal histogram.  Later stages use a
masked neighbor-context model: each queried position gathers K neighbor
slots, every observed neighbor contributing the sum of its M symbol
embeddings and every masked or out-of-grid neighbor contributing a shared
mask embedding; the concatenated features pass through one tanh hidden
layer and M softmax heads, one per sub-quantizer.  A single parameter set
serves every stage.

Inference (`predict`) runs in fixed-size padded blocks so results are
bit-identical no matter how callers batch their queries; encoder and
decoder therefore replay exactly the same distributions.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._binio import crc32, f32_bytes, read_exact, u64_digest
from .errors import CorruptDataError, InvalidConfigError, InvalidInputError, UnsupportedVersionError

MARGINAL_MAGIC = b"PQH1"
MARGINAL_VERSION = 1
CONTEXT_MAGIC = b"PQM1M"
CONTEXT_VERSION = 1

CDF_PRECISION_BITS = 16

# 8-neighborhood at distance 1 plus the four axial offsets at distance 2,
# as (dy, dx) pairs in fixed serialization order.
DEFAULT_OFFSETS: tuple[tuple[int, int], ...] = (
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
    (-2, 0), (0, -2), (0, 2), (2, 0),
)

_PREDICT_BLOCK = 128
_LN2 = math.log(2.0)


# ---------------------------------------------------------------------------
# Marginal model
# ---------------------------------------------------------------------------

@dataclass
class MarginalModel:
    """Add-1 smoothed per-head symbol histogram.

    Attributes:
        counts: Raw occurrence counts, shape (M, V_s), int64.
    """

    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2:
            raise InvalidConfigError("marginal counts must have shape (M, V_s)")
        if np.any(self.counts < 0):
            raise InvalidConfigError("negative marginal counts")

    @property
    def num_subspaces(self) -> int:
        return self.counts.shape[0]

    @property
    def num_symbols(self) -> int:
        return self.counts.shape[1]

    def probabilities(self) -> np.ndarray:
        """(M, V_s) probabilities, p(j) = (count_j + 1) / (N + V_s)."""
        totals = self.counts.sum(axis=1, keepdims=True)
        return (self.counts + 1.0) / (totals + self.num_symbols)


def fit_marginal(token_grids, num_subspaces: int, num_symbols: int) -> MarginalModel:
    """Histogram token sub-indices over a corpus of (h, w, M) grids."""
    counts = np.zeros((num_subspaces, num_symbols), dtype=np.int64)
    seen = False
    for grid in token_grids:
        grid = np.asarray(grid)
        if grid.shape[-1] != num_subspaces:
            raise InvalidInputError("token grid depth does not match M")
        seen = True
        for m in range(num_subspaces):
            counts[m] += np.bincount(grid[..., m].ravel(), minlength=num_symbols)
    if not seen:
        raise InvalidInputError("empty token corpus")
    return MarginalModel(counts)


# ---------------------------------------------------------------------------
# Context model
# ---------------------------------------------------------------------------

@dataclass
class ContextModel:
    """Masked neighbor-context predictor.

    Attributes:
        embeddings: Per-sub-quantizer symbol embeddings, (M, V_s, e).
        mask_embedding: Feature used for masked / out-of-grid neighbors, (e,).
        offsets: Neighbor offsets as (dy, dx) rows, (K, 2) int8 range.
        w_hidden, b_hidden: Hidden layer, (K*e, hdim) and (hdim,).
        w_heads, b_heads: Output heads, (M, hdim, V_s) and (M, V_s).
    """

    embeddings: np.ndarray
    mask_embedding: np.ndarray
    offsets: np.ndarray
    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_heads: np.ndarray
    b_heads: np.ndarray

    def __post_init__(self) -> None:
        for name in ("embeddings", "mask_embedding", "w_hidden", "b_hidden", "w_heads", "b_heads"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.offsets = np.asarray(self.offsets, dtype=np.int64).reshape(-1, 2)
        m, v, e = self.embeddings.shape
        k = self.offsets.shape[0]
        hdim = self.b_hidden.shape[0]
        if self.mask_embedding.shape != (e,):
            raise InvalidConfigError("mask embedding width mismatch")
        if self.w_hidden.shape != (k * e, hdim):
            raise InvalidConfigError("hidden layer shape mismatch")
        if self.w_heads.shape != (m, hdim, v) or self.b_heads.shape != (m, v):
            raise InvalidConfigError("head shapes mismatch")

    @property
    def num_subspaces(self) -> int:
        return self.embeddings.shape[0]

    @property
    def num_symbols(self) -> int:
        return self.embeddings.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[2]

    @property
    def hidden_dim(self) -> int:
        return self.b_hidden.shape[0]

    @property
    def num_neighbors(self) -> int:
        return self.offsets.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "embeddings": self.embeddings,
            "mask_embedding": self.mask_embedding,
            "w_hidden": self.w_hidden,
            "b_hidden": self.b_hidden,
            "w_heads": self.w_heads,
            "b_heads": self.b_heads,
        }


def init_context_model(
    num_subspaces: int,
    num_symbols: int,
    embed_dim: int = 16,
    hidden_dim: int = 128,
    offsets=DEFAULT_OFFSETS,
    seed: int = 0,
) -> ContextModel:
    """Fresh model: embeddings and hidden layer ~ U(-0.05, 0.05), heads zero.

    Zero heads make an untrained model predict the exact uniform
    distribution, which is also the correct coding fallback.
    """
    rng = np.random.default_rng(seed)
    offs = np.asarray(offsets, dtype=np.int64).reshape(-1, 2)
    k = offs.shape[0]

    def u(*shape):
        return rng.uniform(-0.05, 0.05, size=shape)

    return ContextModel(
        embeddings=u(num_subspaces, num_symbols, embed_dim),
        mask_embedding=u(embed_dim),
        offsets=offs,
        w_hidden=u(k * embed_dim, hidden_dim),
        b_hidden=u(hidden_dim),
        w_heads=np.zeros((num_subspaces, hidden_dim, num_symbols)),
        b_heads=np.zeros((num_subspaces, num_symbols)),
    )


def _summed_embeddings(model: ContextModel, grid: np.ndarray) -> np.ndarray:
    """(h, w, e) map of per-position summed symbol embeddings."""
    total = model.embeddings[0][grid[..., 0]]
    for m in range(1, model.num_subspaces):
        total = total + model.embeddings[m][grid[..., m]]
    return total


def _gather_features(
    model: ContextModel, grid: np.ndarray, observed: np.ndarray, positions: np.ndarray
):
    """Neighbor features for flat `positions`.

    Returns (features (P, K*e), valid (P, K), neighbor_flat (P, K)); entries
    of neighbor_flat are meaningful only where valid is True.
    """
    h, w = grid.shape[:2]
    ys, xs = positions // w, positions % w
    ny = ys[:, None] + model.offsets[None, :, 0]
    nx = xs[:, None] + model.offsets[None, :, 1]
    inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
    nyc = np.clip(ny, 0, h - 1)
    nxc = np.clip(nx, 0, w - 1)
    valid = inside & observed[nyc, nxc]
    sum_emb = _summed_embeddings(model, grid)
    feats = np.where(valid[..., None], sum_emb[nyc, nxc], model.mask_embedding)
    p = positions.size
    return feats.reshape(p, model.num_neighbors * model.embed_dim), valid, nyc * w + nxc


def _validated_positions(grid: np.ndarray, positions) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.int64).ravel()
    total = grid.shape[0] * grid.shape[1]
    if positions.size and (positions.min() < 0 or positions.max() >= total):
        raise InvalidInputError("position outside the token grid")
    return positions


def predict(
    model: ContextModel, grid: np.ndarray, observed_mask: np.ndarray, positions
) -> np.ndarray:
    """Per-position conditional distributions, shape (P, M, V_s).

    Token values at unobserved positions are never read, so a partially
    decoded grid with placeholder values yields exactly the encoder's
    distributions.  Bit-reproducible for fixed parameters and inputs
    regardless of how callers group positions into calls: the forward pass
    runs in constant-shape padded blocks.
    """
    grid = np.asarray(grid)
    observed = np.asarray(observed_mask, dtype=bool)
    if grid.ndim != 3 or grid.shape[-1] != model.num_subspaces:
        raise InvalidInputError("token grid must be (h, w, M)")
    if observed.shape != grid.shape[:2]:
        raise InvalidInputError("observed mask shape must match the grid")
    positions = _validated_positions(grid, positions)

    m_count, v = model.num_subspaces, model.num_symbols
    p_total = positions.size
    out = np.empty((p_total, m_count, v), dtype=np.float64)
    if p_total == 0:
        return out

    feats, _, _ = _gather_features(model, grid, observed, positions)
    width = feats.shape[1]
    block = np.zeros((_PREDICT_BLOCK, width), dtype=np.float64)
    for start in range(0, p_total, _PREDICT_BLOCK):
        n = min(_PREDICT_BLOCK, p_total - start)
        block[:n] = feats[start : start + n]
        block[n:] = 0.0
        hidden = np.tanh(block @ model.w_hidden + model.b_hidden)
        for m in range(m_count):
            logits = hidden @ model.w_heads[m] + model.b_heads[m]
            logits -= logits.max(axis=1, keepdims=True)
            ex = np.exp(logits)
            out[start : start + n, m, :] = (ex / ex.sum(axis=1, keepdims=True))[:n]
    return out


def _forward_training(model: ContextModel, feats: np.ndarray):
    """Fast-path forward for training; returns (hidden, probs (P, M, V))."""
    hidden = np.tanh(feats @ model.w_hidden + model.b_hidden)
    logits = np.einsum("ph,mhv->pmv", hidden, model.w_heads) + model.b_heads
    logits -= logits.max(axis=2, keepdims=True)
    ex = np.exp(logits)
    return hidden, ex / ex.sum(axis=2, keepdims=True)


def train_step(model: ContextModel, batch, learning_rate: float, seed) -> float:
    """One masked-prediction SGD step over a batch of token grids.

    Per grid a masked fraction r ~ U(0, 1) is drawn and ceil(r*T) positions
    (at least one) are masked uniformly at random; the loss is the mean
    cross-entropy in bits over all masked positions and all M heads, and a
    plain SGD update with `learning_rate` is applied in place.

    Args:
        batch: Iterable of (h, w, M) token grids (sizes may differ).
        seed: Integer seed or a numpy Generator driving the masking.

    Returns:
        The pre-update loss in bits per head per masked position.
    """
    rng = np.random.default_rng(seed)
    grids = [np.asarray(g) for g in batch]
    if not grids:
        raise InvalidInputError("empty training batch")

    m_count, v = model.num_subspaces, model.num_symbols
    grads = {name: np.zeros_like(p) for name, p in model.parameters().items()}
    loss_nats = 0.0
    total_positions = 0

    for grid in grids:
        h, w = grid.shape[:2]
        total = h * w
        r = rng.random()
        n_mask = max(1, int(np.ceil(r * total)))
        masked = np.sort(rng.permutation(total)[:n_mask])
        observed = np.ones((h, w), dtype=bool)
        observed.reshape(-1)[masked] = False

        feats, valid, nflat = _gather_features(model, grid, observed, masked)
        hidden, probs = _forward_training(model, feats)
        targets = grid.reshape(total, m_count)[masked]

        pos_idx = np.arange(n_mask)
        picked = probs[pos_idx[:, None], np.arange(m_count)[None, :], targets]
        loss_nats -= float(np.log(np.maximum(picked, 1e-300)).sum())
        total_positions += n_mask

        dlogits = probs.copy()
        dlogits[pos_idx[:, None], np.arange(m_count)[None, :], targets] -= 1.0

        grads["w_heads"] += np.einsum("ph,pmv->mhv", hidden, dlogits)
        grads["b_heads"] += dlogits.sum(axis=0)
        dhidden = np.einsum("pmv,mhv->ph", dlogits, model.w_heads)
        dpre = dhidden * (1.0 - hidden * hidden)
        grads["w_hidden"] += feats.T @ dpre
        grads["b_hidden"] += dpre.sum(axis=0)

        dfeat = (dpre @ model.w_hidden.T).reshape(n_mask, model.num_neighbors, model.embed_dim)
        vmask = valid.reshape(n_mask, model.num_neighbors)
        grads["mask_embedding"] += dfeat[~vmask].sum(axis=0)
        if vmask.any():
            dvalid = dfeat[vmask]
            nidx = nflat[vmask]
            flat_tokens = grid.reshape(total, m_count)
            for m in range(m_count):
                np.add.at(grads["embeddings"][m], flat_tokens[nidx, m], dvalid)

    scale = 1.0 / (total_positions * m_count * _LN2)
    loss_bits = loss_nats * scale
    if learning_rate:
        for name, param in model.parameters().items():
            param -= learning_rate * scale * grads[name]
    return loss_bits


def cross_entropy_bits_per_token(
    model: ContextModel, grid: np.ndarray, observed_mask: np.ndarray, positions
) -> float:
    """Mean over positions of the summed per-head -log2 p(target)."""
    grid = np.asarray(grid)
    positions = _validated_positions(grid, positions)
    if positions.size == 0:
        return 0.0
    probs = predict(model, grid, observed_mask, positions)
    m_count = model.num_subspaces
    targets = grid.reshape(-1, m_count)[positions]
    picked = probs[np.arange(positions.size)[:, None], np.arange(m_count)[None, :], targets]
    return float(-np.log2(np.maximum(picked, 1e-300)).sum(axis=1).mean())


def marginal_cross_entropy_bits_per_token(marginal: MarginalModel, token_grids) -> float:
    """Corpus-mean of the summed per-head -log2 p_marginal(token)."""
    logp = np.log2(marginal.probabilities())
    total_bits = 0.0
    total_tokens = 0
    for grid in token_grids:
        grid = np.asarray(grid)
        flat = grid.reshape(-1, marginal.num_subspaces)
        for m in range(marginal.num_subspaces):
            total_bits -= float(logp[m][flat[:, m]].sum())
        total_tokens += flat.shape[0]
    if total_tokens == 0:
        raise InvalidInputError("empty token corpus")
    return total_bits / total_tokens


# ---------------------------------------------------------------------------
# CDF quantization
# ---------------------------------------------------------------------------

def quantize_cdf(p: np.ndarray, precision_bits: int = CDF_PRECISION_BITS) -> np.ndarray:
    """Discretize distributions to integer CDFs totalling 2**precision_bits.

    Largest-remainder rounding with a floor of one count per symbol; ties
    break toward the lower symbol index, and the floor deficit is taken by
    repeatedly decrementing the currently largest width.  Accepts any
    (..., V) stack of distributions and returns (..., V+1) int64 CDFs.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] < 1:
        raise InvalidConfigError("need at least one symbol")
    shape = p.shape
    v = shape[-1]
    total = 1 << precision_bits
    if v > total:
        raise InvalidConfigError(f"{v} symbols cannot each get a width at {precision_bits} bits")
    flat = p.reshape(-1, v)
    if not np.all(np.isfinite(flat)) or np.any(flat < -1e-9):
        raise InvalidConfigError("probabilities must be finite and non-negative")
    flat = np.maximum(flat, 0.0)
    sums = flat.sum(axis=1, keepdims=True)
    if np.any(sums <= 0.0):
        raise InvalidConfigError("distribution sums to zero")
    ideal = flat / sums * total

    widths = np.floor(ideal).astype(np.int64)
    remainder = ideal - widths
    leftover = total - widths.sum(axis=1)
    rank = np.argsort(-remainder, axis=1, kind="stable")
    bump = np.arange(v)[None, :] < leftover[:, None]
    rows = np.arange(flat.shape[0])[:, None]
    add = np.zeros_like(widths)
    add[rows, rank] = bump
    widths += add

    deficient = np.flatnonzero((widths == 0).any(axis=1))
    for r in deficient:
        row = widths[r]
        need = int((row == 0).sum())
        row[row == 0] = 1
        while need > 0:
            j = int(np.argmax(row))
            row[j] -= 1
            need -= 1
        widths[r] = row

    cdf = np.zeros((flat.shape[0], v + 1), dtype=np.int64)
    np.cumsum(widths, axis=1, out=cdf[:, 1:])
    return cdf.reshape(*shape[:-1], v + 1)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def marginal_to_bytes(model: MarginalModel) -> bytes:
    if model.num_subspaces > 0xFF or model.num_symbols > 0xFFFF:
        raise InvalidConfigError("marginal exceeds the file format's field widths")
    body = MARGINAL_MAGIC + struct.pack(
        "<BBH", MARGINAL_VERSION, model.num_subspaces, model.num_symbols
    )
    body += np.ascontiguousarray(model.counts, dtype="<u8").tobytes()
    return body + struct.pack("<I", crc32(body))


def marginal_id(model: MarginalModel) -> int:
    return u64_digest(marginal_to_bytes(model)[:-4])


def marginal_from_bytes(data: bytes) -> MarginalModel:
    if data[:4] != MARGINAL_MAGIC:
        raise CorruptDataError("not a marginal model file (bad magic)")
    version, m, v = struct.unpack("<BBH", read_exact(data, 4, 4, "marginal header"))
    if version != MARGINAL_VERSION:
        raise UnsupportedVersionError(f"marginal file version {version} unsupported")
    raw = read_exact(data, 8, 8 * m * v, "marginal counts")
    (stored_crc,) = struct.unpack("<I", read_exact(data, 8 + len(raw), 4, "marginal CRC"))
    if stored_crc != crc32(data[: 8 + len(raw)]):
        raise CorruptDataError("marginal CRC mismatch")
    counts = np.frombuffer(raw, dtype="<u8").astype(np.int64).reshape(m, v)
    return MarginalModel(counts)


def save_marginal(path: str | Path, model: MarginalModel) -> int:
    data = marginal_to_bytes(model)
    Path(path).write_bytes(data)
    return u64_digest(data[:-4])


def load_marginal(path: str | Path) -> MarginalModel:
    return marginal_from_bytes(Path(path).read_bytes())


def context_to_bytes(model: ContextModel) -> bytes:
    m, v, e = model.embeddings.shape
    hdim, k = model.hidden_dim, model.num_neighbors
    if m > 0xFF or v > 0xFFFF or e > 0xFFFF or hdim > 0xFFFF or k > 0xFF:
        raise InvalidConfigError("context model exceeds the file format's field widths")
    if np.any(np.abs(model.offsets) > 127):
        raise InvalidConfigError("offsets must fit in signed bytes")
    body = CONTEXT_MAGIC + struct.pack("<BBHHHB", CONTEXT_VERSION, m, v, e, hdim, k)
    body += np.ascontiguousarray(model.offsets, dtype="<i1").tobytes()
    for param in model.parameters().values():
        body += f32_bytes(param)
    body += struct.pack("<I", crc32(body))
    return body + struct.pack("<Q", u64_digest(body[:-4]))


def context_model_id(model: ContextModel) -> int:
    return u64_digest(context_to_bytes(model)[:-12])


def context_from_bytes(data: bytes) -> ContextModel:
    if data[:5] != CONTEXT_MAGIC:
        raise CorruptDataError("not a context model file (bad magic)")
    version, m, v, e, hdim, k = struct.unpack("<BBHHHB", read_exact(data, 5, 9, "context header"))
    if version != CONTEXT_VERSION:
        raise UnsupportedVersionError(f"context model file version {version} unsupported")
    pos = 14
    offsets = (
        np.frombuffer(read_exact(data, pos, 2 * k, "context offsets"), dtype="<i1")
        .astype(np.int64)
        .reshape(k, 2)
    )
    pos += 2 * k
    shapes = {
        "embeddings": (m, v, e),
        "mask_embedding": (e,),
        "w_hidden": (k * e, hdim),
        "b_hidden": (hdim,),
        "w_heads": (m, hdim, v),
        "b_heads": (m, v),
    }
    params = {}
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        raw = read_exact(data, pos, 4 * count, f"context {name}")
        params[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
        pos += 4 * count
    (stored_crc,) = struct.unpack("<I", read_exact(data, pos, 4, "context CRC"))
    if stored_crc != crc32(data[:pos]):
        raise CorruptDataError("context model CRC mismatch")
    (stored_hash,) = struct.unpack("<Q", read_exact(data, pos + 4, 8, "context hash"))
    if stored_hash != u64_digest(data[:pos]):
        raise CorruptDataError("context model parameter hash mismatch")
    return ContextModel(offsets=offsets, **params)


def save_context_model(path: str | Path, model: ContextModel) -> int:
    data = context_to_bytes(model)
    Path(path).write_bytes(data)
    return u64_digest(data[:-12])


def load_context_model(path: str | Path) -> ContextModel:
    return context_from_bytes(Path(path).read_bytes())
