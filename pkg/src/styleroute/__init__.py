"""Style-conditioned mixture-of-experts LoRA routing for a desk-scale diffusion stylizer."""

__version__ = "0.1.0"
