"""Minimal multimodal diffusion transformer with optional MoE-LoRA sites.

The token sequence is the concatenation [c, z_t, z_c]: condition tokens,
noisy image patch tokens, and clean content patch tokens, attended jointly
with full (unmasked) scaled-dot attention. Training regresses the velocity
of the linear interpolant x_t = (1 - t) * x0 + t * eps on the z_t block
(target velocity eps - x0); sampling runs fixed-step Euler from t=1 to 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .moe import MoEConfig, MoESite, RouterDecision, DEFAULT_SITES
from .optim import Adam, uniform_fan_in

__all__ = [
    "DiTConfig",
    "TokenSequence",
    "AttentionBlock",
    "ToyDiT",
    "MoEDiT",
    "assemble_tokens",
    "mm_attention",
    "scaled_dot_attention",
    "attach_moe",
    "patchify",
    "unpatchify",
    "normalize_image",
    "denormalize_image",
    "flow_interpolant",
    "flow_loss",
    "sample_euler",
    "pretrain_base",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiTConfig:
    image_size: int = 16
    patch_size: int = 4
    width: int = 64
    heads: int = 4
    blocks: int = 2
    mlp_ratio: int = 4
    cond_vocab: int = 8

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def tokens_per_image(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


@dataclass
class TokenSequence:
    """Concatenated token blocks with recorded [c | z_t | z_c] boundaries."""

    tokens: Tensor
    boundaries: tuple[int, int]

    def __len__(self) -> int:
        return self.tokens.data.shape[0]

    def split(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        b0, b1 = self.boundaries
        data = self.tokens.data
        return data[:b0], data[b0:b1], data[b1:]


@dataclass
class AttentionBlock:
    """Projection weights for one multimodal attention application."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    heads: int

    @property
    def head_dim(self) -> int:
        return self.w_q.data.shape[1] // self.heads


def assemble_tokens(c, z_t, z_c) -> TokenSequence:
    """Order-preserving concatenation [c, z_t, z_c]; empty c is allowed."""
    zt = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    if zt.data.ndim != 2 or zt.data.shape[0] == 0:
        raise ValueError(f"z_t block must be a non-empty rank-2 token matrix, got shape {zt.data.shape}")
    width = zt.data.shape[1]

    def as_block(block, label: str) -> Tensor:
        if block is None or np.size(block.data if isinstance(block, Tensor) else block) == 0:
            return Tensor(np.zeros((0, width)))
        t = block if isinstance(block, Tensor) else Tensor(block)
        if t.data.ndim != 2:
            raise ShapeError(f"{label} block must be rank 2, got {t.data.shape}")
        if t.data.shape[1] != width:
            raise ShapeError(f"{label} block width {t.data.shape[1]} != z_t width {width}")
        return t

    parts = [as_block(c, "c"), zt, as_block(z_c, "z_c")]
    n_c, n_t = parts[0].data.shape[0], zt.data.shape[0]
    tokens = ag.concat(parts, axis=0)
    return TokenSequence(tokens=tokens, boundaries=(n_c, n_c + n_t))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, collect: list | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V per head over column slices of width d."""
    width = q.data.shape[1]
    if width % heads:
        raise ShapeError(f"projection width {width} not divisible by {heads} heads")
    d = width // heads
    outs = []
    for h in range(heads):
        cols = slice(h * d, (h + 1) * d)
        qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
        weights = ag.softmax(ag.matmul(qh, kh.T) * (1.0 / np.sqrt(d)), axis=1)
        if collect is not None:
            collect.append(weights.data.copy())
        outs.append(ag.matmul(weights, vh))
    return ag.concat(outs, axis=1)


def mm_attention(seq: TokenSequence, block: AttentionBlock, collect: list | None = None) -> TokenSequence:
    """Full multimodal attention over the concatenated sequence."""
    tokens = seq.tokens
    if tokens.data.shape[1] != block.w_q.data.shape[0]:
        raise ShapeError(
            f"token width {tokens.data.shape[1]} does not match projection input {block.w_q.data.shape[0]}"
        )
    q = ag.matmul(tokens, block.w_q)
    k = ag.matmul(tokens, block.w_k)
    v = ag.matmul(tokens, block.w_v)
    return TokenSequence(
        tokens=scaled_dot_attention(q, k, v, block.heads, collect=collect),
        boundaries=seq.boundaries,
    )


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, 3) -> (n_patches, patch*patch*3), patches row-major, pixels row-major."""
    h, w, _ = image.shape
    gh, gw = h // patch, w // patch
    return (
        image.reshape(gh, patch, gw, patch, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, patch * patch * 3)
    )


def unpatchify(tokens: np.ndarray, image_size: int, patch: int) -> np.ndarray:
    g = image_size // patch
    return (
        tokens.reshape(g, g, patch, patch, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(image_size, image_size, 3)
    )


def normalize_image(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float64) / 127.5 - 1.0


def denormalize_image(image: np.ndarray) -> np.ndarray:
    return np.clip((image + 1.0) * 127.5, 0.0, 255.0).round().astype(np.uint8)


def _time_features(t: float, width: int) -> np.ndarray:
    half = width // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


class ToyDiT:
    """Desk-scale DiT. Linear sites are dispatched through ``_linear`` so an
    attached adapter can add per-site expert corrections."""

    NORM_EPS = 1e-5

    def __init__(self, config: DiTConfig, rng: np.random.Generator):
        self.config = config
        self.site_adapter = None
        w, mlp = config.width, config.width * config.mlp_ratio
        p: dict[str, Tensor] = {}
        p["patch.w"] = Tensor(uniform_fan_in(rng, (config.patch_dim, w), config.patch_dim), requires_grad=True)
        p["patch.b"] = Tensor(np.zeros(w), requires_grad=True)
        p["time.w"] = Tensor(uniform_fan_in(rng, (w, w), w), requires_grad=True)
        p["time.b"] = Tensor(np.zeros(w), requires_grad=True)
        p["cond.table"] = Tensor(uniform_fan_in(rng, (config.cond_vocab, w), w), requires_grad=True)
        for i in range(config.blocks):
            pre = f"block{i}"
            p[f"{pre}.ln1.g"] = Tensor(np.ones(w), requires_grad=True)
            p[f"{pre}.ln1.b"] = Tensor(np.zeros(w), requires_grad=True)
            for name in ("attn.q", "attn.k", "attn.v", "attn.out"):
                p[f"{pre}.{name}.w"] = Tensor(uniform_fan_in(rng, (w, w), w), requires_grad=True)
                p[f"{pre}.{name}.b"] = Tensor(np.zeros(w), requires_grad=True)
            p[f"{pre}.ln2.g"] = Tensor(np.ones(w), requires_grad=True)
            p[f"{pre}.ln2.b"] = Tensor(np.zeros(w), requires_grad=True)
            p[f"{pre}.ffn.in.w"] = Tensor(uniform_fan_in(rng, (w, mlp), w), requires_grad=True)
            p[f"{pre}.ffn.in.b"] = Tensor(np.zeros(mlp), requires_grad=True)
            p[f"{pre}.ffn.out.w"] = Tensor(uniform_fan_in(rng, (mlp, w), mlp), requires_grad=True)
            p[f"{pre}.ffn.out.b"] = Tensor(np.zeros(w), requires_grad=True)
        p["final.ln.g"] = Tensor(np.ones(w), requires_grad=True)
        p["final.ln.b"] = Tensor(np.zeros(w), requires_grad=True)
        p["head.w"] = Tensor(uniform_fan_in(rng, (w, config.patch_dim), w), requires_grad=True)
        p["head.b"] = Tensor(np.zeros(config.patch_dim), requires_grad=True)
        self.params = p

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            incoming = arrays[name]
            if incoming.shape != p.data.shape:
                raise ValueError(f"model array {name!r} has shape {incoming.shape}, expected {p.data.shape}")
            p.data = incoming.astype(np.float64).copy()

    def site_dims(self) -> dict[str, tuple[int, int]]:
        """d_in/d_out of every linear that may carry experts (per block)."""
        w, mlp = self.config.width, self.config.width * self.config.mlp_ratio
        return {
            "attn.q": (w, w),
            "attn.k": (w, w),
            "attn.v": (w, w),
            "attn.out": (w, w),
            "ffn.in": (w, mlp),
            "ffn.out": (mlp, w),
        }

    def _linear(self, name: str, x: Tensor) -> Tensor:
        out = ag.matmul(x, self.params[f"{name}.w"]) + self.params[f"{name}.b"]
        if self.site_adapter is not None:
            out = self.site_adapter(name, x, out)
        return out

    def _norm(self, name: str, x: Tensor) -> Tensor:
        return ag.layernorm(x, eps=self.NORM_EPS) * self.params[f"{name}.g"] + self.params[f"{name}.b"]

    def forward(self, cond_ids: np.ndarray, z_t_patches, z_c_patches, t: float) -> Tensor:
        """Predict velocity tokens for the z_t block; inputs are patch matrices."""
        cfg = self.config
        cond_ids = np.asarray(cond_ids, dtype=np.intp).reshape(-1)
        c_tok = ag.take(self.params["cond.table"], cond_ids) if cond_ids.size else Tensor(np.zeros((0, cfg.width)))
        zt_tok = self._linear("patch", z_t_patches if isinstance(z_t_patches, Tensor) else Tensor(z_t_patches))
        zc_tok = self._linear("patch", z_c_patches if isinstance(z_c_patches, Tensor) else Tensor(z_c_patches))
        seq = assemble_tokens(c_tok, zt_tok, zc_tok)
        t_emb = ag.matmul(Tensor(_time_features(t, cfg.width)), self.params["time.w"]) + self.params["time.b"]
        x = seq.tokens + t_emb.reshape(1, -1)
        for i in range(cfg.blocks):
            pre = f"block{i}"
            xn = self._norm(f"{pre}.ln1", x)
            q = self._linear(f"{pre}.attn.q", xn)
            k = self._linear(f"{pre}.attn.k", xn)
            v = self._linear(f"{pre}.attn.v", xn)
            attn = self._linear(f"{pre}.attn.out", scaled_dot_attention(q, k, v, cfg.heads))
            x = x + attn
            xn = self._norm(f"{pre}.ln2", x)
            x = x + self._linear(f"{pre}.ffn.out", ag.gelu(self._linear(f"{pre}.ffn.in", xn)))
        x = self._norm("final.ln", x)
        b0, b1 = seq.boundaries
        zt_states = x[b0:b1, :]
        return ag.matmul(zt_states, self.params["head.w"]) + self.params["head.b"]


class MoEDiT:
    """A ToyDiT with MoE-LoRA sites attached to its listed linear layers.

    The base model's weights stay frozen; the adapter intercepts each listed
    linear and adds the shared plus routed expert corrections. Every forward
    pass routes once per site from a single style embedding and appends one
    (site, decision) entry per site to the active trace list.
    """

    def __init__(self, base: ToyDiT, sites: dict[str, MoESite], embedding_dim: int):
        self.base = base
        self.sites = sites
        self.embedding_dim = embedding_dim
        self.site_order = list(sites)

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for site in self.sites.values():
            params.update(site.parameters())
        return params

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters().items():
            incoming = arrays[name]
            if incoming.shape != p.data.shape:
                raise ValueError(f"adapter array {name!r} has shape {incoming.shape}, expected {p.data.shape}")
            p.data = incoming.astype(np.float64).copy()

    def forward(self, cond_ids, z_t_patches, z_c_patches, t: float, e_s, trace: list | None = None) -> Tensor:
        def adapter(name: str, x: Tensor, base_out: Tensor) -> Tensor:
            site = self.sites.get(name)
            if site is None:
                return base_out
            out, decision = site.apply(x, base_out, e_s)
            if trace is not None:
                trace.append((name, decision))
            return out

        self.base.site_adapter = adapter
        try:
            return self.base.forward(cond_ids, z_t_patches, z_c_patches, t)
        finally:
            self.base.site_adapter = None

    def route_all(self, e_s: np.ndarray) -> dict[str, RouterDecision]:
        """Gradient-free routing of every site for a fixed style embedding."""
        from .moe import route

        return {name: route(e_s, site.router, site.config.top_k) for name, site in self.sites.items()}


def attach_moe(model: ToyDiT, config: MoEConfig, embedding_dim: int, rng: np.random.Generator) -> MoEDiT:
    """Instrument every listed linear site of every block; freezes the base."""
    known = model.site_dims()
    for rel in config.sites:
        if rel not in known:
            raise ValueError(f"unknown MoE site name: {rel!r} (known: {sorted(known)})")
    model.freeze()
    sites: dict[str, MoESite] = {}
    for i in range(model.config.blocks):
        for rel in config.sites:
            d_in, d_out = known[rel]
            name = f"block{i}.{rel}"
            sites[name] = MoESite.init(name, rng, d_in, d_out, embedding_dim, config)
    return MoEDiT(base=model, sites=sites, embedding_dim=embedding_dim)


def flow_interpolant(x0: np.ndarray, noise: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Return (x_t, target velocity) for x_t = (1-t) x0 + t noise."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return (1.0 - t) * x0 + t * noise, noise - x0


def flow_loss(model, x0_image: np.ndarray, z_c_image: np.ndarray, cond_id: int, t: float, noise: np.ndarray,
              e_s=None, trace: list | None = None) -> Tensor:
    """Velocity-regression MSE on the z_t block only.

    ``model`` is a ToyDiT (e_s ignored) or a MoEDiT (e_s required);
    images are normalized float arrays in [-1, 1].
    """
    patch = model.base.config.patch_size if isinstance(model, MoEDiT) else model.config.patch_size
    x_t, target = flow_interpolant(x0_image, noise, t)
    zt = patchify(x_t, patch)
    zc = patchify(z_c_image, patch)
    if isinstance(model, MoEDiT):
        pred = model.forward(np.array([cond_id]), zt, zc, t, e_s, trace=trace)
    else:
        pred = model.forward(np.array([cond_id]), zt, zc, t)
    diff = pred - Tensor(patchify(target, patch))
    loss = ag.reduce_mean(diff * diff)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError(f"non-finite flow loss at t={t}")
    return loss


def sample_euler(model, cond_id: int, z_c_image: np.ndarray, e_s=None, steps: int = 20,
                 seed: int = 0, trace: list | None = None) -> np.ndarray:
    """Deterministic fixed-step Euler integration from t=1 (noise) to t=0."""
    if steps < 1:
        raise ValueError("sampler needs at least one step")
    if isinstance(model, MoEDiT):
        cfg = model.base.config
    else:
        cfg = model.config
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((cfg.image_size, cfg.image_size, 3))
    zc = patchify(z_c_image, cfg.patch_size)
    dt = 1.0 / steps
    for i in range(steps):
        t = 1.0 - i * dt
        zt = patchify(x, cfg.patch_size)
        if isinstance(model, MoEDiT):
            pred = model.forward(np.array([cond_id]), zt, zc, t, e_s, trace=trace)
        else:
            pred = model.forward(np.array([cond_id]), zt, zc, t)
        velocity = unpatchify(pred.data, cfg.image_size, cfg.patch_size)
        x = x - dt * velocity
    return x


def pretrain_base(model: ToyDiT, content_images: list[np.ndarray], cond_ids: list[int],
                  steps: int, lr: float, seed: int) -> list[float]:
    """Brief flow pretraining of the plain DiT on content reconstructions."""
    normed = [normalize_image(img) for img in content_images]
    opt = Adam(list(model.parameters().values()), lr)
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(steps):
        i = int(rng.integers(len(normed)))
        t = float(rng.uniform())
        noise = rng.standard_normal(normed[i].shape)
        loss = flow_loss(model, normed[i], normed[i], cond_ids[i], t, noise)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses
