"""Shared fixtures: the desk-scale corpus and trained stage-1/stage-2 models.

The heavyweight fixtures are session-scoped so the acceptance tests and the
integration tests share one training run each.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from styleroute.curate import StyleSet, select_style_reference, split_styles
from styleroute.dit import DiTConfig
from styleroute.encoder import EncoderConfig, StyleEncoder, train_encoder
from styleroute.features import extract_features
from styleroute.moe import MoEConfig
from styleroute.synth import apply_style, default_families, generate_content
from styleroute.training import TripletExample, TrainResult, train_stylizer

N_CONTENTS = 40
HOLDOUT = 10
ENCODER_STEPS = 600
STYLIZER_ITERATIONS = 2000


def feature_cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(a @ b / (na * nb)) if na and nb else 0.0


@dataclass
class DeskCorpus:
    contents: list
    families: list
    split: dict
    stylized: dict  # style_id -> list of images (one per content)
    feats: dict  # style_id -> list of feature vectors
    cond_of: dict
    examples: list  # train-split TripletExamples over non-held-out contents
    enc_images: list
    enc_labels: list
    eval_images: list
    eval_labels: list
    eval_is_test_style: list
    build_seconds: float = 0.0

    def all_stylized(self):
        images, keys, sids = [], [], []
        for fam in self.families:
            for ci in range(N_CONTENTS):
                images.append(self.stylized[fam.style_id][ci])
                keys.append(ci)
                sids.append(fam.style_id)
        return images, keys, sids


@pytest.fixture(scope="session")
def desk_corpus() -> DeskCorpus:
    t0 = time.perf_counter()
    contents = generate_content(N_CONTENTS, seed=0)
    families = default_families(0)
    split = split_styles([f.style_id for f in families])
    stylized, feats = {}, {}
    for fi, fam in enumerate(families):
        imgs = [apply_style(c, fam, 1000 + fi * 100 + ci) for ci, c in enumerate(contents)]
        stylized[fam.style_id] = imgs
        feats[fam.style_id] = [extract_features(im).concat() for im in imgs]
    cond_of = {c: i for i, c in enumerate(sorted({c.category for c in contents}))}

    train_until = N_CONTENTS - HOLDOUT
    examples = []
    for fam in families:
        if split[fam.style_id] != "train":
            continue
        style_set = StyleSet(fam.style_id, feats[fam.style_id])
        for ci, c in enumerate(contents[:train_until]):
            ref = select_style_reference(style_set, ci, feature_cosine)
            examples.append(
                TripletExample(
                    content=c.image,
                    style_ref=stylized[fam.style_id][ref],
                    stylized=stylized[fam.style_id][ci],
                    style_id=fam.style_id,
                    cond_id=cond_of[c.category],
                )
            )

    enc_images, enc_labels = [], []
    eval_images, eval_labels, eval_is_test = [], [], []
    for fam in families:
        for ci in range(N_CONTENTS):
            img = stylized[fam.style_id][ci]
            if ci >= train_until:
                eval_images.append(img)
                eval_labels.append(fam.style_id)
                eval_is_test.append(split[fam.style_id] == "test")
            elif split[fam.style_id] == "train":
                enc_images.append(img)
                enc_labels.append(fam.style_id)

    return DeskCorpus(
        contents=contents,
        families=families,
        split=split,
        stylized=stylized,
        feats=feats,
        cond_of=cond_of,
        examples=examples,
        enc_images=enc_images,
        enc_labels=enc_labels,
        eval_images=eval_images,
        eval_labels=eval_labels,
        eval_is_test_style=eval_is_test,
        build_seconds=time.perf_counter() - t0,
    )


@dataclass
class TrainedEncoder:
    encoder: StyleEncoder
    history: dict
    steps: int
    seconds: float


@pytest.fixture(scope="session")
def trained_encoder(desk_corpus) -> TrainedEncoder:
    t0 = time.perf_counter()
    encoder, history = train_encoder(
        desk_corpus.enc_images,
        desk_corpus.enc_labels,
        EncoderConfig(),
        steps=ENCODER_STEPS,
        lr=3e-4,
        batch_size=32,
        seed=0,
    )
    return TrainedEncoder(encoder=encoder, history=history, steps=ENCODER_STEPS, seconds=time.perf_counter() - t0)


@dataclass
class TrainedStylizer:
    result: TrainResult
    dit_config: DiTConfig
    moe_config: MoEConfig
    seconds: float


@pytest.fixture(scope="session")
def trained_stylizer(desk_corpus, trained_encoder) -> TrainedStylizer:
    t0 = time.perf_counter()
    dit_config = DiTConfig(cond_vocab=4)
    moe_config = MoEConfig()
    result = train_stylizer(
        desk_corpus.examples,
        trained_encoder.encoder,
        dit_config,
        moe_config,
        iterations=STYLIZER_ITERATIONS,
        lr=1e-3,
        seed=0,
        base_steps=300,
        base_lr=1e-3,
    )
    return TrainedStylizer(
        result=result, dit_config=dit_config, moe_config=moe_config, seconds=time.perf_counter() - t0
    )
