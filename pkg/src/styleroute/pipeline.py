"""End-to-end dataset generation and curation on top of the synth generators.

``generate_dataset`` renders every content under every family, picks each
stylized image's style reference as the most feature-similar other member of
its style set, and writes the manifest plus a captions sidecar. Everything
derives from the run seed, so reruns are byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .curate import (
    FilterResult,
    MockTripletJudge,
    RemoteJudge,
    JudgeVerdict,
    StyleSet,
    TripletDescriptor,
    TripletRecord,
    MockRewriter,
    build_manifest,
    clean_caption,
    filter_triplets,
    load_manifest,
    select_style_reference,
    split_styles,
    verdict_passes,
)
from .features import ExtractorSpec, extract_features
from .rasters import load_png, save_png
from .synth import CATEGORIES, apply_style, default_families, generate_content, mask_iou, shape_mask

__all__ = ["generate_dataset", "curate_dataset", "load_examples", "sidecar_path"]

FILTER_PROMPT = (
    "Check that the stylized image keeps the layout and object category of "
    "the content image. Answer only YES or NO, then briefly explain."
)


def sidecar_path(manifest_path: str | Path) -> Path:
    return Path(manifest_path).parent / "captions.jsonl"


def _feature_cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def generate_dataset(cfg: RunConfig, out_dir: str | Path, seed: int) -> Path:
    """Render the triplet corpus and write manifest + captions sidecar."""
    out_dir = Path(out_dir)
    families = default_families(seed)
    if cfg.data_styles > len(families):
        raise ValueError(f"at most {len(families)} procedural families available, asked for {cfg.data_styles}")
    families = families[: cfg.data_styles]
    categories = CATEGORIES[: cfg.data_categories]
    contents = generate_content(cfg.data_images_per_style, categories, seed, cfg.data_image_size)

    content_paths = []
    for c in contents:
        rel = f"images/content/{c.content_id}.png"
        save_png(c.image, out_dir / rel)
        content_paths.append(rel)

    spec = ExtractorSpec(image_size=cfg.data_image_size)
    split = split_styles([f.style_id for f in families])
    rewriter = MockRewriter()
    records: list[TripletRecord] = []
    for fi, family in enumerate(families):
        stylized_paths = []
        feats = []
        triplet_seeds = []
        for ci, c in enumerate(contents):
            triplet_seed = seed * 1_000_000 + fi * 1_000 + ci
            img = apply_style(c, family, triplet_seed)
            rel = f"images/{family.style_id}/s{ci:04d}.png"
            save_png(img, out_dir / rel)
            stylized_paths.append(rel)
            feats.append(extract_features(img, spec).concat())
            triplet_seeds.append(triplet_seed)
        style_set = StyleSet(style_id=family.style_id, items=feats)
        for ci, c in enumerate(contents):
            ref = select_style_reference(style_set, ci, _feature_cosine)
            records.append(
                TripletRecord(
                    id=f"{family.style_id}-{c.content_id}",
                    content_path=content_paths[ci],
                    style_path=stylized_paths[ref],
                    stylized_path=stylized_paths[ci],
                    style_id=family.style_id,
                    split=split[family.style_id],
                    seed=triplet_seeds[ci],
                )
            )

    manifest_path = out_dir / "manifest.jsonl"
    build_manifest(records, manifest_path)
    with open(sidecar_path(manifest_path), "w", encoding="utf-8") as fh:
        for c in contents:
            cleaned, _ = clean_caption(c.caption, rewriter)
            fh.write(
                json.dumps(
                    {
                        "content_id": c.content_id,
                        "content_path": f"images/content/{c.content_id}.png",
                        "category": c.category,
                        "caption_raw": c.caption,
                        "caption_clean": cleaned,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return manifest_path


def load_sidecar(manifest_path: str | Path) -> dict[str, dict]:
    entries = {}
    with open(sidecar_path(manifest_path), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                entries[obj["content_path"]] = obj
    return entries


def _remote_triplet_judge(judge: RemoteJudge, root: Path):
    def call(record: TripletRecord) -> JudgeVerdict:
        images = [load_png(root / record.content_path), load_png(root / record.stylized_path)]
        response = judge.ask(images, FILTER_PROMPT)
        return JudgeVerdict(verdict_passes(response), response)

    return call


def _mock_triplet_judge(judge: MockTripletJudge, root: Path, records: list[TripletRecord], sidecar: dict):
    # family centroids over the surrogate features of the stylized corpus
    spec = None
    feats: dict[str, np.ndarray] = {}
    by_style: dict[str, list[str]] = {}
    for record in records:
        img = load_png(root / record.stylized_path)
        if spec is None:
            spec = ExtractorSpec(image_size=img.shape[0])
        feats[record.stylized_path] = extract_features(img, spec).concat()
        by_style.setdefault(record.style_id, []).append(record.stylized_path)
    centroids = {s: np.mean([feats[p] for p in paths], axis=0) for s, paths in by_style.items()}

    def call(record: TripletRecord) -> JudgeVerdict:
        content = load_png(root / record.content_path)
        stylized = load_png(root / record.stylized_path)
        observed_iou = mask_iou(shape_mask(content), shape_mask(stylized))
        distance = 1.0 - _feature_cosine(feats[record.stylized_path], centroids[record.style_id])
        expected = sidecar.get(record.content_path, {}).get("category", "unknown")
        observed = expected if shape_mask(stylized).any() else "missing"
        return judge.judge(
            TripletDescriptor(
                category=observed,
                category_expected=expected,
                mask_iou=observed_iou,
                style_distance=distance,
            )
        )

    return call


def curate_dataset(manifest_path: str | Path, judge_spec: str, out_path: str | Path) -> FilterResult:
    """Filter the manifest through the configured judge and write the survivors.

    ``judge_spec`` is ``"mock"`` or ``"remote:<url>"``. Held items (remote
    judge unreachable) are reported, never silently kept or dropped.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    records = load_manifest(manifest_path)
    sidecar = load_sidecar(manifest_path)

    if judge_spec == "mock":
        call = _mock_triplet_judge(MockTripletJudge(), root, records, sidecar)
    elif judge_spec.startswith("remote:"):
        call = _remote_triplet_judge(RemoteJudge(judge_spec.removeprefix("remote:")), root)
    else:
        raise ValueError(f"unknown judge spec: {judge_spec!r} (use 'mock' or 'remote:<url>')")

    result = filter_triplets(records, call)
    out_path = Path(out_path)
    build_manifest(result.kept, out_path)
    log_path = out_path.parent / (out_path.stem + "_rejections.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        for record, reason in result.rejected:
            fh.write(json.dumps({"id": record.id, "status": "rejected", "reason": reason}, sort_keys=True) + "\n")
        for record, error in result.held:
            fh.write(json.dumps({"id": record.id, "status": "held", "error": error}, sort_keys=True) + "\n")
    return result


@dataclass
class LoadedExample:
    record: TripletRecord
    content: np.ndarray
    style_ref: np.ndarray
    stylized: np.ndarray
    category: str
    cond_id: int


def load_examples(manifest_path: str | Path, split: str | None = None) -> list[LoadedExample]:
    """Materialize manifest records into arrays with category cond ids."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    records = load_manifest(manifest_path)
    sidecar = load_sidecar(manifest_path)
    categories = sorted({entry["category"] for entry in sidecar.values()})
    cond_of = {cat: i for i, cat in enumerate(categories)}
    out = []
    for record in records:
        if split and record.split != split:
            continue
        category = sidecar[record.content_path]["category"]
        out.append(
            LoadedExample(
                record=record,
                content=load_png(root / record.content_path),
                style_ref=load_png(root / record.style_path),
                stylized=load_png(root / record.stylized_path),
                category=category,
                cond_id=cond_of[category],
            )
        )
    return out
