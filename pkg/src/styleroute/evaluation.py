"""Metrics and analyses: expert-overlap IoU with layer staging, binary
semantic verdicts, embedding-retrieval quality, and the encoder A/B
convergence experiment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dit import MoEDiT
from .encoder import StyleEncoder
from .features import ExtractorSpec, extract_features
from .training import TripletExample, train_stylizer

__all__ = [
    "expert_overlap_iou",
    "pick_similar_dissimilar",
    "stage_partition",
    "IoUReport",
    "staged_iou_report",
    "SEMANTIC_PROMPT",
    "MockSemanticJudge",
    "semantic_score",
    "aggregate_scores",
    "RetrievalReport",
    "retrieval_report",
    "ConvergenceResult",
    "convergence_ab",
]

SEMANTIC_PROMPT = (
    "You will see two images. Decide whether they share the same artistic "
    "style in terms of texture, line quality and material rendering, not "
    "merely similar colors. Answer only YES or NO, then briefly explain."
)

MEDIAN_CHECKPOINTS = (500, 1000, 2000)


def expert_overlap_iou(sel_a, sel_b) -> float:
    """Set IoU of two expert index selections."""
    a, b = set(sel_a), set(sel_b)
    if not a or not b:
        raise ValueError("expert selections must be non-empty")
    return len(a & b) / len(a | b)


def pick_similar_dissimilar(anchor, pool: list, sim) -> tuple[int, int]:
    """Indices of the pool items maximizing / minimizing sim(anchor, item).

    Ties resolve to the lowest index. The anchor must not be in the pool.
    """
    if len(pool) < 2:
        raise ValueError(f"pool needs >= 2 members, got {len(pool)}")
    values = [float(sim(anchor, item)) for item in pool]
    idx_s = int(np.argmax(values))
    idx_d = int(np.argmin(values))
    return idx_s, idx_d


def stage_partition(n_layers: int) -> list[list[int]]:
    """Split layer indices into early/mid/late thirds; sizes differ by at
    most one, with extras assigned to the earlier stages."""
    base, rem = divmod(n_layers, 3)
    sizes = [base + (1 if i < rem else 0) for i in range(3)]
    out, start = [], 0
    for size in sizes:
        out.append(list(range(start, start + size)))
        start += size
    return out


@dataclass
class IoUReport:
    site_names: list[str]
    per_layer_sim: list[float]
    per_layer_dissim: list[float]
    stage_sim: list[float]
    stage_dissim: list[float]
    overall_sim: float
    overall_dissim: float
    samples_used: int
    samples_skipped: int

    def to_text(self) -> str:
        lines = ["stage        similar   dissimilar"]
        for name, s, d in zip(("early", "mid", "late"), self.stage_sim, self.stage_dissim):
            lines.append(f"{name:<12} {s:7.2%}   {d:7.2%}")
        lines.append(f"{'overall':<12} {self.overall_sim:7.2%}   {self.overall_dissim:7.2%}")
        lines.append(f"samples used={self.samples_used} skipped={self.samples_skipped}")
        return "\n".join(lines) + "\n"

    def to_records(self) -> list[dict]:
        records = [
            {"layer": i, "site": name, "iou_sim": s, "iou_dissim": d}
            for i, (name, s, d) in enumerate(zip(self.site_names, self.per_layer_sim, self.per_layer_dissim))
        ]
        records.append(
            {
                "overall_sim": self.overall_sim,
                "overall_dissim": self.overall_dissim,
                "stage_sim": self.stage_sim,
                "stage_dissim": self.stage_dissim,
                "samples_used": self.samples_used,
                "samples_skipped": self.samples_skipped,
            }
        )
        return records

    def write(self, text_path: str | Path, records_path: str | Path) -> None:
        Path(text_path).write_text(self.to_text(), encoding="utf-8")
        with open(records_path, "w", encoding="utf-8") as fh:
            for record in self.to_records():
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def staged_iou_report(
    model: MoEDiT,
    encoder: StyleEncoder,
    stylized_images: list[np.ndarray],
    content_keys: list,
    style_ids: list[str],
    samples: int,
    seed: int,
) -> IoUReport:
    """Expert-overlap analysis over sampled (anchor, similar, dissimilar) triples.

    For every sampled anchor the candidate pool is every other image sharing
    its content but carrying a different style; the similar/dissimilar pair
    is picked by encoder-embedding cosine, both are routed through every MoE
    site, and per-layer IoUs are averaged over samples, then staged into
    early/mid/late thirds of the site order.
    """
    if not (len(stylized_images) == len(content_keys) == len(style_ids)):
        raise ValueError("images, content keys and style ids must align")
    spec = ExtractorSpec(image_size=stylized_images[0].shape[0])
    feats = np.stack([extract_features(img, spec).concat() for img in stylized_images])
    embs = encoder.embed_rows(feats).data
    unit = embs / np.linalg.norm(embs, axis=1, keepdims=True)

    by_content: dict = {}
    for i, key in enumerate(content_keys):
        by_content.setdefault(key, []).append(i)

    site_order = model.site_order
    n_sites = len(site_order)
    sums_sim = np.zeros(n_sites)
    sums_dissim = np.zeros(n_sites)
    used = skipped = 0
    rng = np.random.default_rng(seed)
    anchors = rng.integers(0, len(stylized_images), size=samples)
    for anchor in anchors:
        anchor = int(anchor)
        pool = [j for j in by_content[content_keys[anchor]] if style_ids[j] != style_ids[anchor]]
        if len(pool) < 2:
            skipped += 1
            continue
        cosines = unit[pool] @ unit[anchor]
        idx_s = pool[int(np.argmax(cosines))]
        idx_d = pool[int(np.argmin(cosines))]
        dec_a = model.route_all(embs[anchor])
        dec_s = model.route_all(embs[idx_s])
        dec_d = model.route_all(embs[idx_d])
        for li, name in enumerate(site_order):
            sums_sim[li] += expert_overlap_iou(dec_a[name].indices, dec_s[name].indices)
            sums_dissim[li] += expert_overlap_iou(dec_a[name].indices, dec_d[name].indices)
        used += 1
    if used == 0:
        raise ValueError("no sampled anchor had a content-matched pool")

    per_sim = sums_sim / used
    per_dissim = sums_dissim / used
    stages = stage_partition(n_sites)
    stage_sim = [float(np.mean(per_sim[idx])) for idx in stages]
    stage_dissim = [float(np.mean(per_dissim[idx])) for idx in stages]
    return IoUReport(
        site_names=list(site_order),
        per_layer_sim=per_sim.tolist(),
        per_layer_dissim=per_dissim.tolist(),
        stage_sim=stage_sim,
        stage_dissim=stage_dissim,
        overall_sim=float(per_sim.mean()),
        overall_dissim=float(per_dissim.mean()),
        samples_used=used,
        samples_skipped=skipped,
    )


# ---------------------------------------------------------------------------
# semantic score


class MockSemanticJudge:
    """Answers YES when the encoder-cosine between the two images clears the
    threshold; a pure deterministic function of its inputs."""

    def __init__(self, encoder: StyleEncoder, threshold: float = 0.5, spec: ExtractorSpec | None = None):
        self.encoder = encoder
        self.threshold = threshold
        self.spec = spec or ExtractorSpec()

    def ask(self, images: list[np.ndarray], prompt: str) -> str:
        embs = self.encoder.embed_rows(
            np.stack([extract_features(img, self.spec).concat() for img in images[:2]])
        ).data
        cos = float(
            embs[0] @ embs[1] / (np.linalg.norm(embs[0]) * np.linalg.norm(embs[1]))
        )
        if cos >= self.threshold:
            return f"YES, the styles match (cosine {cos:.3f})."
        return f"NO, the styles differ (cosine {cos:.3f})."


def semantic_score(style_image: np.ndarray, output_image: np.ndarray, judge) -> int | None:
    """1 iff the judge's response begins with YES; None when the judge fails."""
    try:
        response = judge.ask([style_image, output_image], SEMANTIC_PROMPT)
    except Exception:
        return None
    return 1 if response.startswith("YES") else 0


def aggregate_scores(scores: list[int | None]) -> tuple[float, int]:
    """Mean over scored items plus the unscored count."""
    scored = [s for s in scores if s is not None]
    unscored = len(scores) - len(scored)
    mean = float(np.mean(scored)) if scored else float("nan")
    return mean, unscored


# ---------------------------------------------------------------------------
# retrieval


@dataclass
class RetrievalReport:
    top1: float
    margin: float
    n_queries: int
    excluded_styles: int

    def to_dict(self) -> dict:
        return vars(self)


def retrieval_report(
    encoder: StyleEncoder,
    images: list[np.ndarray],
    labels: list[str],
    query_indices: list[int] | None = None,
    spec: ExtractorSpec | None = None,
) -> RetrievalReport:
    """Leave-one-out nearest-neighbor style retrieval over an eval pool.

    ``top1`` is the fraction of queries whose nearest neighbor (cosine)
    shares their style; ``margin`` is mean same-style cosine minus mean
    cross-style cosine over all pool pairs. Styles with fewer than two
    images are dropped from the pool and counted.
    """
    spec = spec or ExtractorSpec(image_size=images[0].shape[0])
    counts: dict[str, int] = {}
    for lab in labels:
        counts[lab] = counts.get(lab, 0) + 1
    excluded = {lab for lab, n in counts.items() if n < 2}
    keep = [i for i, lab in enumerate(labels) if lab not in excluded]
    if len(keep) < 2:
        raise ValueError("retrieval pool needs at least two images after exclusions")
    index_of = {orig: new for new, orig in enumerate(keep)}
    pool_labels = [labels[i] for i in keep]
    feats = np.stack([extract_features(images[i], spec).concat() for i in keep])
    embs = encoder.embed_rows(feats).data
    unit = embs / np.linalg.norm(embs, axis=1, keepdims=True)
    cos = unit @ unit.T

    if query_indices is None:
        queries = list(range(len(keep)))
    else:
        queries = [index_of[i] for i in query_indices if i in index_of]
    if not queries:
        raise ValueError("no valid retrieval queries")

    masked = cos.copy()
    np.fill_diagonal(masked, -np.inf)
    hits = sum(1 for q in queries if pool_labels[int(np.argmax(masked[q]))] == pool_labels[q])

    lab_arr = np.asarray(pool_labels, dtype=object)
    same_mask = lab_arr.reshape(-1, 1) == lab_arr.reshape(1, -1)
    triu = np.triu(np.ones_like(cos, dtype=bool), k=1)
    same_vals = cos[same_mask & triu]
    cross_vals = cos[~same_mask & triu]
    margin = float(same_vals.mean() - cross_vals.mean()) if same_vals.size and cross_vals.size else float("nan")
    return RetrievalReport(
        top1=hits / len(queries),
        margin=margin,
        n_queries=len(queries),
        excluded_styles=len(excluded),
    )


# ---------------------------------------------------------------------------
# convergence A/B


@dataclass
class ConvergenceResult:
    curves: dict  # arm -> {seed: [loss, ...]}
    medians: dict  # arm -> {iteration: median smoothed loss}
    divergence: dict  # arm -> event count
    checkpoints: tuple[int, ...] = MEDIAN_CHECKPOINTS

    def to_dict(self) -> dict:
        return {
            "medians": self.medians,
            "divergence": self.divergence,
            "checkpoints": list(self.checkpoints),
            "curves": self.curves,
        }


def _smoothed_at(losses: list[float], iteration: int, window: int = 100) -> float:
    if len(losses) < iteration:
        return float("inf")
    lo = max(0, iteration - window)
    return float(np.mean(losses[lo:iteration]))


def convergence_ab(
    examples: list[TripletExample],
    trained_encoder: StyleEncoder,
    dit_config,
    moe_config,
    iterations: int,
    lr: float,
    seeds: list[int],
    base_steps: int = 300,
    base_lr: float = 1e-3,
    checkpoints: tuple[int, ...] = MEDIAN_CHECKPOINTS,
) -> ConvergenceResult:
    """Paired A/B: frozen pretrained encoder vs randomly initialized
    trainable encoder, sharing seeds, data order and expert initialization."""
    from .dit import ToyDiT, pretrain_base
    from .encoder import StyleEncoder as Enc

    curves: dict = {"pretrained": {}, "random": {}}
    divergence = {"pretrained": 0, "random": 0}
    for seed in seeds:
        base = ToyDiT(dit_config, np.random.default_rng(seed))
        contents, cond_ids, seen = [], [], set()
        for ex in examples:
            key = ex.content.tobytes()
            if key not in seen:
                seen.add(key)
                contents.append(ex.content)
                cond_ids.append(ex.cond_id)
        pretrain_base(base, contents, cond_ids, base_steps, base_lr, seed + 1)

        for arm in ("pretrained", "random"):
            if arm == "pretrained":
                enc = Enc(trained_encoder.config, np.random.default_rng(0))
                enc.load_state_arrays(trained_encoder.state_arrays())
                trainable = False
            else:
                enc = Enc(trained_encoder.config, np.random.default_rng(seed + 97))
                trainable = True
            result = train_stylizer(
                examples,
                enc,
                dit_config,
                moe_config,
                iterations=iterations,
                lr=lr,
                seed=seed,
                base_model=base,
                trainable_encoder=trainable,
            )
            curves[arm][seed] = result.losses
            if result.diverged_at is not None:
                divergence[arm] += 1

    checkpoints = tuple(k for k in checkpoints if k <= iterations)
    medians = {
        arm: {k: float(np.median([_smoothed_at(curves[arm][s], k) for s in seeds])) for k in checkpoints}
        for arm in curves
    }
    return ConvergenceResult(curves=curves, medians=medians, divergence=divergence, checkpoints=checkpoints)
