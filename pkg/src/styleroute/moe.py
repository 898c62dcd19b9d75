"""Similarity-gated mixture of low-rank experts.

A site holds N_e rank-r LoRA experts, one shared expert applied
unconditionally, and a router mapping a style embedding to per-expert
logits. Routing keeps the k largest logits (ties resolved to the lowest
index), renormalizes them with a softmax over the survivors only, and the
layer output is

    h' = base_out + (alpha / r) * (B_s A_s + sum_i w_i B_i A_i) h

with w_i = 0 for every unselected expert. Gradients flow to the surviving
logits only; non-survivors receive exactly zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .optim import uniform_fan_in

__all__ = [
    "LoraExpert",
    "Router",
    "RouterDecision",
    "MoEConfig",
    "MoESite",
    "top_k_indices",
    "route",
    "route_weights",
    "moe_forward",
    "expert_param_count",
]

DEFAULT_SITES = ("attn.q", "attn.k", "attn.v", "attn.out", "ffn.in", "ffn.out")


@dataclass
class LoraExpert:
    """Rank-r update B @ A for one linear site (A: r x d_in, B: d_out x r)."""

    a: Tensor
    b: Tensor

    @staticmethod
    def init(rng: np.random.Generator, d_in: int, d_out: int, rank: int, trainable: bool = True) -> "LoraExpert":
        # B starts at zero so the site is exactly the base linear at step 0.
        return LoraExpert(
            a=Tensor(uniform_fan_in(rng, (rank, d_in), d_in), requires_grad=trainable),
            b=Tensor(np.zeros((d_out, rank)), requires_grad=trainable),
        )

    def param_count(self) -> int:
        return self.a.data.size + self.b.data.size


@dataclass
class Router:
    """Affine map from the style embedding to per-expert logits."""

    weight: Tensor
    bias: Tensor

    @staticmethod
    def init(rng: np.random.Generator, embedding_dim: int, num_experts: int, trainable: bool = True) -> "Router":
        return Router(
            weight=Tensor(uniform_fan_in(rng, (embedding_dim, num_experts), embedding_dim), requires_grad=trainable),
            bias=Tensor(np.zeros(num_experts), requires_grad=trainable),
        )

    def logits(self, e_s) -> Tensor:
        e = e_s if isinstance(e_s, Tensor) else Tensor(np.asarray(e_s, dtype=np.float64))
        flat = e.reshape(-1) if e.data.ndim > 1 else e
        return ag.matmul(flat, self.weight) + self.bias

    @property
    def num_experts(self) -> int:
        return self.weight.data.shape[1]

    def param_count(self) -> int:
        return self.weight.data.size + self.bias.data.size


@dataclass(frozen=True)
class RouterDecision:
    """The k selected expert indices (ascending) with their softmax weights."""

    indices: tuple[int, ...]
    weights: np.ndarray

    def __post_init__(self):
        if len(self.indices) != len(set(self.indices)):
            raise ValueError("selected expert indices must be distinct")
        if len(self.indices) != len(self.weights):
            raise ValueError("indices and weights must align")


@dataclass(frozen=True)
class MoEConfig:
    num_experts: int = 16
    top_k: int = 2
    rank: int = 8
    alpha: float = 8.0
    sites: tuple[str, ...] = DEFAULT_SITES

    def __post_init__(self):
        if not (1 <= self.top_k <= self.num_experts):
            raise ValueError(f"top_k must satisfy 1 <= k <= {self.num_experts}, got {self.top_k}")
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


def top_k_indices(logits: np.ndarray, k: int) -> tuple[int, ...]:
    """Indices of the k largest logits, ties to the lowest index, ascending."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if k > logits.size:
        raise ValueError(f"k={k} exceeds expert count {logits.size}")
    order = np.argsort(-logits, kind="stable")[:k]
    return tuple(sorted(int(i) for i in order))


def route(e_s: np.ndarray, router: Router, k: int) -> RouterDecision:
    """Evaluate the router without gradient tracking."""
    e = np.asarray(e_s, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(e)):
        raise ValueError("style embedding must be finite")
    logits = e @ router.weight.data + router.bias.data
    indices = top_k_indices(logits, k)
    survivors = logits[list(indices)]
    shifted = np.exp(survivors - survivors.max())
    return RouterDecision(indices=indices, weights=shifted / shifted.sum())


def route_weights(logits: Tensor, k: int) -> tuple[tuple[int, ...], Tensor]:
    """Differentiable routing: selection on values, softmax over survivors."""
    indices = top_k_indices(logits.data, k)
    survivors = ag.take(logits, np.array(indices, dtype=np.intp))
    return indices, ag.softmax(survivors, axis=-1)


def _lora_apply(x: Tensor, expert: LoraExpert) -> Tensor:
    return ag.matmul(ag.matmul(x, expert.a.T), expert.b.T)


def moe_forward(h, base_out, decision, experts: list[LoraExpert], shared: LoraExpert, alpha: float, r: int):
    """Combine the base output with the shared and selected expert updates.

    ``h`` may be a vector (d_in,) or a row matrix (n, d_in); ``decision`` is
    either a RouterDecision (plain weights) or an (indices, weight Tensor)
    pair from ``route_weights`` so gradients reach the router.
    """
    h = h if isinstance(h, Tensor) else Tensor(h)
    base_out = base_out if isinstance(base_out, Tensor) else Tensor(base_out)
    if isinstance(decision, RouterDecision):
        indices, weights = decision.indices, Tensor(decision.weights)
    else:
        indices, weights = decision
    d_in = h.data.shape[-1]
    d_out = base_out.data.shape[-1]
    for expert in [shared] + list(experts):
        if expert.a.data.shape != (r, d_in) or expert.b.data.shape != (d_out, r):
            raise ShapeError(
                f"expert shapes {expert.a.data.shape}/{expert.b.data.shape} inconsistent with "
                f"rank {r}, d_in {d_in}, d_out {d_out}"
            )
    x = h.reshape(1, -1) if h.data.ndim == 1 else h
    correction = _lora_apply(x, shared)
    for slot, idx in enumerate(indices):
        w = ag.take(weights, np.array([slot], dtype=np.intp)).reshape(())
        correction = correction + _lora_apply(x, experts[idx]) * w
    correction = correction * (alpha / r)
    if h.data.ndim == 1:
        correction = correction.reshape(-1)
    if correction.data.shape != base_out.data.shape:
        raise ShapeError(f"correction shape {correction.data.shape} != base output {base_out.data.shape}")
    return base_out + correction


@dataclass
class MoESite:
    """All adapter state attached to one host linear layer."""

    name: str
    router: Router
    experts: list[LoraExpert]
    shared: LoraExpert
    config: MoEConfig

    @staticmethod
    def init(name: str, rng: np.random.Generator, d_in: int, d_out: int, embedding_dim: int, config: MoEConfig) -> "MoESite":
        return MoESite(
            name=name,
            router=Router.init(rng, embedding_dim, config.num_experts),
            experts=[LoraExpert.init(rng, d_in, d_out, config.rank) for _ in range(config.num_experts)],
            shared=LoraExpert.init(rng, d_in, d_out, config.rank),
            config=config,
        )

    def apply(self, x: Tensor, base_out: Tensor, e_s) -> tuple[Tensor, RouterDecision]:
        indices, weights = route_weights(self.router.logits(e_s), self.config.top_k)
        out = moe_forward(x, base_out, (indices, weights), self.experts, self.shared, self.config.alpha, self.config.rank)
        return out, RouterDecision(indices=indices, weights=weights.data.copy())

    def parameters(self) -> dict[str, Tensor]:
        params = {f"{self.name}.router.weight": self.router.weight, f"{self.name}.router.bias": self.router.bias}
        params[f"{self.name}.shared.a"] = self.shared.a
        params[f"{self.name}.shared.b"] = self.shared.b
        for i, expert in enumerate(self.experts):
            params[f"{self.name}.expert{i}.a"] = expert.a
            params[f"{self.name}.expert{i}.b"] = expert.b
        return params

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters().values())


def expert_param_count(config: MoEConfig, site_dims: list[tuple[int, int]], embedding_dim: int) -> int:
    """Closed-form trainable parameter total for the given MoE attachment."""
    total = 0
    per_expert = lambda d_in, d_out: config.rank * d_in + d_out * config.rank
    for d_in, d_out in site_dims:
        total += config.num_experts * per_expert(d_in, d_out)
        total += per_expert(d_in, d_out)
        total += embedding_dim * config.num_experts + config.num_experts
    return total
