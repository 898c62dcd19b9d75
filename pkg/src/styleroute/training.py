"""Stage-2 training: MoE-LoRA adapters routed by a frozen style encoder.

The base transformer is briefly pretrained on content reconstructions, then
frozen; only the expert/router (and, for the ablation arm, encoder)
parameters train. The per-step data stream (triplet index, timestep, noise)
is a pure function of the seed, so two runs with the same seed produce
byte-identical checkpoints, and ablation arms sharing a seed see identical
data.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .dit import DiTConfig, MoEDiT, ToyDiT, attach_moe, flow_loss, normalize_image, pretrain_base, sample_euler, denormalize_image
from .encoder import EncoderConfig, StyleEncoder
from .features import ExtractorSpec, extract_features
from .moe import MoEConfig
from .optim import Adam

__all__ = [
    "TripletExample",
    "TrainResult",
    "train_stylizer",
    "save_stylizer_checkpoint",
    "load_stylizer_checkpoint",
    "save_encoder_checkpoint",
    "load_encoder_checkpoint",
    "stylize",
    "write_trace_file",
]

logger = logging.getLogger(__name__)

COLLAPSE_WINDOW = 500
COLLAPSE_SHARE = 0.95


@dataclass
class TripletExample:
    content: np.ndarray
    style_ref: np.ndarray
    stylized: np.ndarray
    style_id: str
    cond_id: int


@dataclass
class TrainResult:
    model: MoEDiT
    encoder: StyleEncoder
    losses: list[float]
    collapse_warnings: int
    diverged_at: int | None  # iteration index of a non-finite loss, else None
    traces: list | None = None


def _balance_penalty(model: MoEDiT, e_s) -> Tensor:
    """Optional load-balance term: mean over sites of N_e/k * sum of the
    full-softmax probability mass landing on the selected experts."""
    from .moe import top_k_indices

    terms = []
    for site in model.sites.values():
        logits = site.router.logits(e_s)
        probs = ag.softmax(logits, axis=-1)
        idx = np.array(top_k_indices(logits.data, site.config.top_k), dtype=np.intp)
        share = ag.reduce_sum(ag.take(probs, idx))
        terms.append(share * (site.config.num_experts / site.config.top_k))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def train_stylizer(
    examples: list[TripletExample],
    encoder: StyleEncoder,
    dit_config: DiTConfig,
    moe_config: MoEConfig,
    iterations: int,
    lr: float,
    seed: int,
    base_steps: int = 300,
    base_lr: float = 1e-3,
    base_model: ToyDiT | None = None,
    trainable_encoder: bool = False,
    balance_loss: bool = False,
    balance_coeff: float = 0.01,
    record_traces: bool = False,
    stop_on_divergence: bool = True,
) -> TrainResult:
    """Train expert/router parameters on triplets; deterministic per seed."""
    if not examples:
        raise ValueError("no training triplets supplied")

    if base_model is None:
        base_model = ToyDiT(dit_config, np.random.default_rng(seed))
        contents, cond_ids, seen = [], [], set()
        for ex in examples:
            key = ex.content.tobytes()
            if key not in seen:
                seen.add(key)
                contents.append(ex.content)
                cond_ids.append(ex.cond_id)
        pretrain_base(base_model, contents, cond_ids, base_steps, base_lr, seed + 1)
    model = attach_moe(base_model, moe_config, encoder.config.embedding_dim, np.random.default_rng(seed + 2))

    spec = ExtractorSpec(image_size=dit_config.image_size)
    ref_feats = np.stack([extract_features(ex.style_ref, spec).concat() for ex in examples])
    frozen_embeddings = None
    if not trainable_encoder:
        frozen_embeddings = encoder.embed_rows(ref_feats).data

    params = list(model.parameters().values())
    if trainable_encoder:
        params += list(encoder.parameters().values())
    opt = Adam(params, lr)

    normed = [(normalize_image(ex.stylized), normalize_image(ex.content)) for ex in examples]
    data_rng = np.random.default_rng(seed + 3)
    image_shape = (dit_config.image_size, dit_config.image_size, 3)

    losses: list[float] = []
    traces: list[tuple[int, str, list]] = []
    selection_window: Counter = Counter()
    window_total = 0
    collapse_warnings = 0
    diverged_at = None

    for it in range(iterations):
        idx = int(data_rng.integers(len(examples)))
        t = float(data_rng.uniform())
        noise = data_rng.standard_normal(image_shape)
        ex = examples[idx]
        if frozen_embeddings is not None:
            e_s = frozen_embeddings[idx]
        else:
            e_s = encoder.embed_rows(Tensor(ref_feats[idx : idx + 1]))
        trace: list = []
        try:
            loss = flow_loss(model, normed[idx][0], normed[idx][1], ex.cond_id, t, noise, e_s, trace=trace)
            if balance_loss:
                loss = loss + _balance_penalty(model, e_s) * balance_coeff
        except FloatingPointError:
            diverged_at = it
            if stop_on_divergence:
                break
            raise
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())

        for _, decision in trace:
            selection_window.update(decision.indices)
            window_total += len(decision.indices)
        if record_traces:
            traces.append((it, ex.style_id, [(name, d.indices, d.weights.tolist()) for name, d in trace]))
        if window_total and (it + 1) % COLLAPSE_WINDOW == 0:
            top_expert, top_count = selection_window.most_common(1)[0]
            if top_count / window_total > COLLAPSE_SHARE:
                collapse_warnings += 1
                logger.warning(
                    "routing collapse: expert %d received %.1f%% of selections over the last %d steps",
                    top_expert, 100.0 * top_count / window_total, COLLAPSE_WINDOW,
                )
            selection_window.clear()
            window_total = 0

    return TrainResult(
        model=model,
        encoder=encoder,
        losses=losses,
        collapse_warnings=collapse_warnings,
        diverged_at=diverged_at,
        traces=traces if record_traces else None,
    )


def write_trace_file(path: str | Path, traces) -> None:
    """Routing trace record stream: one JSON object per (forward, site)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for it, style_id, sites in traces:
            for layer_index, (name, indices, weights) in enumerate(sites):
                fh.write(
                    json.dumps(
                        {
                            "iteration": it,
                            "layer": layer_index,
                            "site": name,
                            "style_id": style_id,
                            "indices": list(indices),
                            "weights": weights,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )


# ---------------------------------------------------------------------------
# checkpoint wiring


def save_encoder_checkpoint(path: str | Path, encoder: StyleEncoder, meta: dict) -> None:
    arrays = {f"encoder.{k}": v for k, v in encoder.state_arrays().items()}
    meta = dict(meta)
    meta["kind"] = "encoder"
    meta["encoder_config"] = vars(encoder.config)
    save_checkpoint(path, arrays, meta)


def load_encoder_checkpoint(path: str | Path) -> tuple[StyleEncoder, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "encoder":
        raise ValueError(f"{path}: not an encoder checkpoint (kind={meta.get('kind')!r})")
    config = EncoderConfig(**meta["encoder_config"])
    encoder = StyleEncoder(config, np.random.default_rng(0))
    encoder.load_state_arrays({k.removeprefix("encoder."): v for k, v in arrays.items()})
    return encoder, meta


def save_stylizer_checkpoint(path: str | Path, result: TrainResult, meta: dict) -> None:
    model = result.model
    arrays: dict[str, np.ndarray] = {}
    arrays.update({f"dit.{k}": v for k, v in model.base.state_arrays().items()})
    arrays.update({f"moe.{k}": v for k, v in model.state_arrays().items()})
    arrays.update({f"encoder.{k}": v for k, v in result.encoder.state_arrays().items()})
    site_config = model.sites[model.site_order[0]].config
    meta = dict(meta)
    meta["kind"] = "stylizer"
    meta["dit_config"] = vars(model.base.config)
    meta["moe_config"] = {
        "num_experts": site_config.num_experts,
        "top_k": site_config.top_k,
        "rank": site_config.rank,
        "alpha": site_config.alpha,
        "sites": list(site_config.sites),
    }
    meta["encoder_config"] = vars(result.encoder.config)
    meta["loss_curve"] = result.losses
    meta["collapse_warnings"] = result.collapse_warnings
    save_checkpoint(path, arrays, meta)


def load_stylizer_checkpoint(path: str | Path) -> tuple[MoEDiT, StyleEncoder, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "stylizer":
        raise ValueError(f"{path}: not a stylizer checkpoint (kind={meta.get('kind')!r})")
    dit_config = DiTConfig(**meta["dit_config"])
    moe_meta = dict(meta["moe_config"])
    moe_meta["sites"] = tuple(moe_meta["sites"])
    moe_config = MoEConfig(**moe_meta)
    encoder_config = EncoderConfig(**meta["encoder_config"])

    base = ToyDiT(dit_config, np.random.default_rng(0))
    base.load_state_arrays({k.removeprefix("dit."): v for k, v in arrays.items() if k.startswith("dit.")})
    model = attach_moe(base, moe_config, encoder_config.embedding_dim, np.random.default_rng(0))
    model.load_state_arrays({k.removeprefix("moe."): v for k, v in arrays.items() if k.startswith("moe.")})
    encoder = StyleEncoder(encoder_config, np.random.default_rng(0))
    encoder.load_state_arrays({k.removeprefix("encoder."): v for k, v in arrays.items() if k.startswith("encoder.")})
    return model, encoder, meta


def stylize(
    content_image: np.ndarray,
    style_image: np.ndarray,
    model: MoEDiT,
    encoder: StyleEncoder,
    steps: int = 20,
    seed: int = 0,
    cond_id: int = 0,
    trace: list | None = None,
) -> np.ndarray:
    """Render the content in the reference style; deterministic per seed."""
    spec = ExtractorSpec(image_size=model.base.config.image_size)
    e_s = encoder.embed_rows(extract_features(style_image, spec).concat().reshape(1, -1)).data[0]
    out = sample_euler(model, cond_id, normalize_image(content_image), e_s, steps=steps, seed=seed, trace=trace)
    return denormalize_image(out)
