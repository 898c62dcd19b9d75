"""Style embedding encoder: MLP head over the surrogate feature stack,
trained with a masked contrastive objective between two batches.

The loss construction:
  * similarity d(e_i, e_j) = (e_i . e_j) / (tau * |e_i| * |e_j|)
  * per-row log-probabilities l_ij = log softmax_j d(e_i, e'_j)
  * positive mask M_ij = 1 iff the two rows share a style label
  * per-row loss = -(sum_j M_ij l_ij) / (sum_j M_ij), averaged over the rows
    that have at least one positive (zero-positive rows are excluded and
    counted, never averaged in)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .features import ExtractorSpec, FeatureStack, extract_features
from .optim import make_optimizer, uniform_fan_in

__all__ = [
    "EncoderConfig",
    "StyleEncoder",
    "DegenerateBatchError",
    "CollapsedEmbeddingError",
    "embed",
    "scaled_cosine",
    "logits_matrix",
    "positive_mask",
    "infonce_loss",
    "rows_without_positive",
    "train_encoder",
]

NORM_FLOOR = 1e-12


class DegenerateBatchError(ValueError):
    """Raised when no row of a contrastive batch has a positive partner."""


class CollapsedEmbeddingError(RuntimeError):
    """Raised when training drives all embeddings onto one ray."""


@dataclass(frozen=True)
class EncoderConfig:
    input_width: int = ExtractorSpec().width
    hidden_width: int = 128
    embedding_dim: int = 64
    tau: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if min(self.input_width, self.hidden_width, self.embedding_dim) < 1:
            raise ValueError("encoder widths must be positive")


class StyleEncoder:
    """Two affine layers with a GELU between (W1/b1 -> gelu -> W2/b2)."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.w1 = Tensor(uniform_fan_in(rng, (config.input_width, config.hidden_width), config.input_width), requires_grad=True)
        self.b1 = Tensor(np.zeros(config.hidden_width), requires_grad=True)
        self.w2 = Tensor(uniform_fan_in(rng, (config.hidden_width, config.embedding_dim), config.hidden_width), requires_grad=True)
        self.b2 = Tensor(np.zeros(config.embedding_dim), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def embed_rows(self, rows) -> Tensor:
        """Map a (B, input_width) feature matrix to (B, embedding_dim)."""
        x = rows if isinstance(rows, Tensor) else Tensor(np.atleast_2d(rows))
        if x.data.shape[-1] != self.config.input_width:
            raise ValueError(
                f"feature width {x.data.shape[-1]} does not match encoder input width {self.config.input_width}"
            )
        hidden = ag.gelu(ag.matmul(x, self.w1) + self.b1)
        return ag.matmul(hidden, self.w2) + self.b2

    def embed_image(self, image: np.ndarray, spec: ExtractorSpec | None = None) -> np.ndarray:
        """Convenience: raster -> feature stack -> embedding, gradient-free."""
        stack = extract_features(image, spec)
        return embed(stack, self).data[0]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters().items():
            incoming = arrays[name]
            if incoming.shape != p.data.shape:
                raise ValueError(f"encoder array {name!r} has shape {incoming.shape}, expected {p.data.shape}")
            p.data = incoming.astype(np.float64).copy()


def embed(stack: FeatureStack, encoder: StyleEncoder) -> Tensor:
    """Concatenate the stack levels in order 1..L and push through the MLP."""
    flat = stack.concat()
    if flat.size != encoder.config.input_width:
        raise ValueError(
            f"concatenated stack width {flat.size} does not match encoder input width {encoder.config.input_width}"
        )
    return encoder.embed_rows(flat.reshape(1, -1))


def _norms(e: Tensor) -> Tensor:
    return ag.sqrt(ag.reduce_sum(e * e, axis=1, keepdims=True))


def scaled_cosine(e_i, e_j, tau: float) -> float:
    """Temperature-scaled cosine similarity between two embedding vectors."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    a = np.asarray(e_i.data if isinstance(e_i, Tensor) else e_i, dtype=np.float64).reshape(-1)
    b = np.asarray(e_j.data if isinstance(e_j, Tensor) else e_j, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= NORM_FLOOR or nb <= NORM_FLOOR:
        raise ValueError("near-zero embedding norm (collapsed embedding)")
    return float(a @ b / (tau * na * nb))


def logits_matrix(e_batch: Tensor, e_batch_prime: Tensor, tau: float) -> Tensor:
    """Row-wise log softmax of the scaled-cosine similarity matrix."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if e_batch.data.shape != e_batch_prime.data.shape:
        raise ValueError(
            f"batch shapes differ: {e_batch.data.shape} vs {e_batch_prime.data.shape}"
        )
    for e in (e_batch, e_batch_prime):
        if np.any(np.linalg.norm(e.data, axis=1) <= NORM_FLOOR):
            raise ValueError("near-zero embedding norm (collapsed embedding)")
    left = e_batch / _norms(e_batch)
    right = e_batch_prime / _norms(e_batch_prime)
    d = ag.matmul(left, right.T) * (1.0 / tau)
    return ag.log_softmax(d, axis=1)


def positive_mask(labels, labels_prime) -> np.ndarray:
    """M_ij = 1 iff labels[i] == labels_prime[j]."""
    left = np.asarray(labels, dtype=object).reshape(-1, 1)
    right = np.asarray(labels_prime, dtype=object).reshape(1, -1)
    return (left == right).astype(np.float64)


def rows_without_positive(mask: np.ndarray) -> int:
    return int(np.sum(mask.sum(axis=1) == 0))


def infonce_loss(log_probs: Tensor, mask: np.ndarray) -> Tensor:
    """Masked mean of per-row positive log-probabilities, negated.

    Rows with no positive are excluded from the average; a batch where every
    row lacks a positive is rejected as degenerate.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != log_probs.data.shape:
        raise ValueError(f"mask shape {mask.shape} does not match logits shape {log_probs.data.shape}")
    counts = mask.sum(axis=1)
    keep = np.nonzero(counts > 0)[0]
    if keep.size == 0:
        raise DegenerateBatchError("every row has zero positives; batch sampling is degenerate")
    weighted = ag.reduce_sum(log_probs * mask, axis=1) / Tensor(np.maximum(counts, 1.0))
    return -ag.reduce_mean(ag.take(weighted, keep))


def _stratified_batches(labels_by_style: dict, batch_size: int, rng: np.random.Generator):
    """Draw two aligned batches where every style slot appears in both.

    Each of the ``batch_size // 2`` slots picks a style and contributes one
    image to each batch, so every row is guaranteed a positive partner.
    """
    styles = sorted(labels_by_style)
    slots = max(1, batch_size // 2)
    if slots <= len(styles):
        chosen = list(rng.choice(len(styles), size=slots, replace=False))
    else:
        chosen = list(rng.integers(0, len(styles), size=slots))
    idx_a, idx_b, lab = [], [], []
    for s in chosen:
        style = styles[s]
        pool = labels_by_style[style]
        pick = rng.choice(len(pool), size=2, replace=len(pool) < 2)
        idx_a.append(pool[pick[0]])
        idx_b.append(pool[pick[1]])
        lab.append(style)
    return np.array(idx_a), np.array(idx_b), lab


def _collapse_check(embeddings: np.ndarray, labels: list, step: int) -> None:
    """Abort if all cross-style pairs have cosine > 0.999."""
    norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
    if np.any(norms <= NORM_FLOOR):
        raise CollapsedEmbeddingError(f"zero-norm embedding at step {step}")
    unit = embeddings / norms
    cos = unit @ unit.T
    lab = np.asarray(labels, dtype=object)
    cross = lab.reshape(-1, 1) != lab.reshape(1, -1)
    if cross.any() and np.all(cos[cross] > 0.999):
        raise CollapsedEmbeddingError(
            f"embeddings collapsed at step {step}: all cross-style cosines exceed 0.999"
        )


def train_encoder(
    images: list[np.ndarray],
    labels: list,
    config: EncoderConfig,
    steps: int,
    lr: float,
    batch_size: int,
    seed: int,
    optimizer: str = "adam",
    spec: ExtractorSpec | None = None,
    collapse_check_every: int = 50,
) -> tuple[StyleEncoder, dict]:
    """Train the encoder on a labeled corpus; deterministic under ``seed``.

    Returns the encoder plus a history dict with the loss curve and the
    zero-positive-row warning counter.
    """
    if len(images) != len(labels):
        raise ValueError("images and labels must align")
    by_style: dict = {}
    for i, lab in enumerate(labels):
        by_style.setdefault(lab, []).append(i)
    if len(by_style) < 2 or min(len(v) for v in by_style.values()) < 2:
        raise ValueError("need at least 2 styles with at least 2 images each")

    spec = spec or ExtractorSpec()
    feats = np.stack([extract_features(img, spec).concat() for img in images])

    init_rng = np.random.default_rng(seed)
    enc = StyleEncoder(config, init_rng)
    opt = make_optimizer(optimizer, list(enc.parameters().values()), lr)
    data_rng = np.random.default_rng(seed + 1)

    losses: list[float] = []
    zero_positive_rows = 0
    for step in range(steps):
        idx_a, idx_b, lab = _stratified_batches(by_style, batch_size, data_rng)
        e_a = enc.embed_rows(feats[idx_a])
        e_b = enc.embed_rows(feats[idx_b])
        mask = positive_mask(lab, lab)
        zero_positive_rows += rows_without_positive(mask)
        loss = infonce_loss(logits_matrix(e_a, e_b, config.tau), mask)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if collapse_check_every and (step + 1) % collapse_check_every == 0:
            _collapse_check(np.vstack([e_a.data, e_b.data]), lab + lab, step + 1)

    history = {"loss": losses, "zero_positive_rows": zero_positive_rows}
    return enc, history
