"""Run configuration: flat dotted-key text format, strict about unknown keys.

The dataclass defaults are the full-scale profile from the method's original
training recipe (stage-1 lr 1e-5 / batch 128 / 3500 steps; stage-2 lr 1e-4 /
10000 iterations with 16 experts, top-2, rank 8). ``desk_profile`` scales the
run lengths and batch size down to CPU-minutes while keeping the adapter
dimensions intact.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

__all__ = ["RunConfig", "ConfigError", "parse_config", "serialize_config", "desk_profile", "paper_profile"]


class ConfigError(ValueError):
    """Raised for unknown keys, bad values, or failed validation."""


@dataclass
class RunConfig:
    data_styles: int = 12
    data_images_per_style: int = 40
    data_image_size: int = 16
    data_categories: int = 4
    data_holdout_per_style: int = 10
    stage1_lr: float = 1e-5
    stage1_batch: int = 128
    stage1_steps: int = 3500
    stage1_tau: float = 0.1
    stage1_embedding_dim: int = 64
    stage1_hidden_width: int = 128
    stage1_optimizer: str = "adam"
    stage2_lr: float = 1e-4
    stage2_iterations: int = 10000
    stage2_experts: int = 16
    stage2_top_k: int = 2
    stage2_rank: int = 8
    stage2_alpha: float = 8.0
    stage2_base_steps: int = 300
    stage2_base_lr: float = 1e-3
    stage2_balance_loss: bool = False
    dit_blocks: int = 2
    dit_width: int = 64
    dit_heads: int = 4
    dit_patch: int = 4
    dit_mlp_ratio: int = 4
    moe_sites: str = "attn.q,attn.k,attn.v,attn.out,ffn.in,ffn.out"
    eval_iou_samples: int = 100
    eval_sampler_steps: int = 20

    def validate(self) -> "RunConfig":
        if self.data_styles < 2:
            raise ConfigError("data.styles must be >= 2")
        if self.data_image_size % self.dit_patch:
            raise ConfigError("data.image_size must be divisible by dit.patch")
        if not (1 <= self.stage2_top_k <= self.stage2_experts):
            raise ConfigError("stage2.top_k must satisfy 1 <= k <= stage2.experts")
        if self.stage2_rank < 1:
            raise ConfigError("stage2.rank must be >= 1")
        if self.stage2_alpha <= 0:
            raise ConfigError("stage2.alpha must be positive")
        if self.stage1_tau <= 0:
            raise ConfigError("stage1.tau must be positive")
        if min(self.stage1_lr, self.stage2_lr) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.data_holdout_per_style >= self.data_images_per_style:
            raise ConfigError("data.holdout_per_style must be < data.images_per_style")
        return self

    def sites(self) -> tuple[str, ...]:
        return tuple(s.strip() for s in self.moe_sites.split(",") if s.strip())

    def to_dict(self) -> dict:
        return {_attr_to_key(f.name): getattr(self, f.name) for f in fields(self)}


def _attr_to_key(attr: str) -> str:
    section, _, rest = attr.partition("_")
    return f"{section}.{rest}"


def _key_to_attr(key: str) -> str:
    section, _, rest = key.partition(".")
    return f"{section}_{rest}"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_KNOWN_KEYS = {_attr_to_key(f.name) for f in fields(RunConfig)}


def _parse_value(key: str, text: str):
    ftype = _FIELD_TYPES[_key_to_attr(key)]
    text = text.strip()
    if ftype == "bool":
        if text not in ("true", "false"):
            raise ConfigError(f"key {key!r}: expected true/false, got {text!r}")
        return text == "true"
    if ftype == "int":
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: expected integer, got {text!r}") from exc
    if ftype == "float":
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: expected number, got {text!r}") from exc
    return text


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; unknown keys are hard errors."""
    cfg = RunConfig(**vars(base)) if base else RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"unknown config key: {key!r}")
        setattr(cfg, _key_to_attr(key), _parse_value(key, value))
    return cfg.validate()


def serialize_config(cfg: RunConfig) -> str:
    lines = [f"{key} = {_format_value(value)}" for key, value in sorted(cfg.to_dict().items())]
    return "\n".join(lines) + "\n"


def paper_profile() -> RunConfig:
    """Full-scale hyperparameters; accepted by validation, impractical on CPU."""
    return RunConfig().validate()


def desk_profile() -> RunConfig:
    """CPU-minutes profile: shorter runs, smaller batch, same adapter shape."""
    cfg = RunConfig(
        stage1_batch=32,
        stage1_steps=600,
        stage1_lr=3e-4,
        stage2_iterations=2000,
        stage2_lr=1e-3,
        stage2_base_steps=300,
    )
    return cfg.validate()
