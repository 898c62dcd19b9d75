"""Triplet curation: style-reference selection, judge filtering, caption
cleaning, and the manifest format.

The style reference for a stylized image is the most similar *other* member
of the same style set under a caller-supplied similarity; ties go to the
lowest index. Judges are pluggable: the deterministic mock judges run fully
offline, while the remote judge speaks a small JSON-over-HTTP protocol
(request {"images": [base64 PNG, ...], "prompt": str} -> response
{"verdict": str}); a verdict passes iff the text begins with "YES"
(case-sensitive prefix).
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "StyleSet",
    "JudgeVerdict",
    "TripletDescriptor",
    "MockTripletJudge",
    "RemoteJudge",
    "JudgeUnavailable",
    "FilterResult",
    "select_style_reference",
    "filter_triplets",
    "verdict_passes",
    "clean_caption",
    "MockRewriter",
    "RemoteRewriter",
    "TripletRecord",
    "ManifestError",
    "split_styles",
    "build_manifest",
    "load_manifest",
]


# ---------------------------------------------------------------------------
# style-reference selection


@dataclass
class StyleSet:
    """All stylized items for one style id."""

    style_id: str
    items: list

    def __post_init__(self):
        if len(self.items) < 2:
            raise ValueError(f"style set {self.style_id!r} needs >= 2 items, got {len(self.items)}")


def select_style_reference(style_set: StyleSet, i: int, sim) -> int:
    """Index of the non-self member maximizing ``sim(items[i], items[k])``.

    Ties resolve to the lowest index; the query itself is never a candidate.
    """
    items = style_set.items
    if not 0 <= i < len(items):
        raise IndexError(f"query index {i} out of range for set of {len(items)}")
    best_k, best_sim = -1, -np.inf
    for k, candidate in enumerate(items):
        if k == i:
            continue
        s = float(sim(items[i], candidate))
        if s > best_sim:
            best_k, best_sim = k, s
    return best_k


# ---------------------------------------------------------------------------
# judges


@dataclass(frozen=True)
class JudgeVerdict:
    passed: bool
    reason: str


@dataclass(frozen=True)
class TripletDescriptor:
    """Pure inputs of the mock triplet judge."""

    category: str
    category_expected: str
    mask_iou: float
    style_distance: float


class MockTripletJudge:
    """Deterministic offline stand-in for a VLM triplet filter."""

    def __init__(self, min_mask_iou: float = 0.5, max_style_distance: float = 0.5):
        self.min_mask_iou = min_mask_iou
        self.max_style_distance = max_style_distance

    def judge(self, desc: TripletDescriptor) -> JudgeVerdict:
        if desc.mask_iou < self.min_mask_iou:
            return JudgeVerdict(False, "layout degradation")
        if desc.category != desc.category_expected:
            return JudgeVerdict(False, "content mismatch")
        if desc.style_distance > self.max_style_distance:
            return JudgeVerdict(False, "poor stylization")
        return JudgeVerdict(True, "ok")


class JudgeUnavailable(RuntimeError):
    """Raised when a remote judge cannot be reached or answers garbage."""


def _png_b64(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def verdict_passes(response_text: str) -> bool:
    """A verdict counts as positive iff it begins with the exact prefix YES."""
    return response_text.startswith("YES")


class RemoteJudge:
    """JSON-over-HTTP judge client; failures surface as JudgeUnavailable."""

    def __init__(self, url: str, timeout: float = 10.0):
        self.url = url
        self.timeout = timeout

    def ask(self, images: list[np.ndarray], prompt: str) -> str:
        payload = json.dumps({"images": [_png_b64(img) for img in images], "prompt": prompt}).encode("utf-8")
        request = urllib.request.Request(self.url, data=payload, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as response:
                body = json.loads(response.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise JudgeUnavailable(f"remote judge at {self.url} failed: {exc}") from exc
        if "verdict" not in body:
            raise JudgeUnavailable(f"remote judge at {self.url} returned no verdict field")
        return str(body["verdict"])


@dataclass
class FilterResult:
    kept: list
    rejected: list  # (item, reason)
    held: list  # (item, error)


def filter_triplets(triplets: list, judge) -> FilterResult:
    """Partition triplets into kept / rejected / held.

    ``judge`` maps a triplet to a JudgeVerdict; raising JudgeUnavailable
    holds the item (it is neither kept nor dropped).
    """
    result = FilterResult(kept=[], rejected=[], held=[])
    for triplet in triplets:
        try:
            verdict = judge(triplet)
        except JudgeUnavailable as exc:
            result.held.append((triplet, str(exc)))
            continue
        if verdict.passed:
            result.kept.append(triplet)
        else:
            result.rejected.append((triplet, verdict.reason))
    return result


# ---------------------------------------------------------------------------
# caption cleaning

BANNED_CAPTION_WORDS = frozenset(
    {
        # colors
        "red", "blue", "green", "yellow", "purple", "orange", "pink", "brown",
        "black", "white", "gray", "grey", "golden", "silver",
        # lighting / atmosphere
        "dark", "bright", "dim", "glowing", "shadowy", "sunny", "moody",
        # material / texture / style
        "shiny", "glossy", "matte", "metallic", "rough", "smooth", "realistic",
        "stylized", "textured", "light-colored", "dark-colored",
    }
)


class MockRewriter:
    """Deletes banned style/color/lighting words and collapses whitespace."""

    def __init__(self, banned=BANNED_CAPTION_WORDS):
        self.banned = frozenset(w.lower() for w in banned)

    def rewrite(self, caption: str) -> str:
        kept = [w for w in caption.split() if w.lower().strip(".,;:!?") not in self.banned]
        return re.sub(r"\s+", " ", " ".join(kept)).strip()


class RemoteRewriter:
    """HTTP rewriter speaking {"prompt": str} -> {"caption": str}."""

    def __init__(self, url: str, timeout: float = 10.0):
        self.url = url
        self.timeout = timeout

    def rewrite(self, caption: str) -> str:
        payload = json.dumps({"prompt": caption}).encode("utf-8")
        request = urllib.request.Request(self.url, data=payload, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as response:
                body = json.loads(response.read().decode("utf-8"))
            return str(body["caption"])
        except (urllib.error.URLError, OSError, ValueError, KeyError) as exc:
            raise JudgeUnavailable(f"remote rewriter at {self.url} failed: {exc}") from exc


def clean_caption(raw: str, rewriter=None) -> tuple[str, bool]:
    """Return (cleaned caption, flagged). On remote failure the raw caption
    is retained and flagged instead of being silently dropped."""
    rewriter = rewriter or MockRewriter()
    try:
        return rewriter.rewrite(raw), False
    except JudgeUnavailable:
        return raw, True


# ---------------------------------------------------------------------------
# manifest format


class ManifestError(ValueError):
    """Raised for malformed manifests or broken referenced paths."""


@dataclass(frozen=True)
class TripletRecord:
    """One manifest line; paths are relative to the manifest location."""

    id: str
    content_path: str
    style_path: str
    stylized_path: str
    style_id: str
    split: str
    seed: int


def split_styles(style_ids: list[str]) -> dict[str, str]:
    """Deterministic 90/10 train/test split over style ids.

    Styles are ranked by the SHA-256 of their id; the lowest
    ``max(1, round(n/10))`` become the test split. Depends only on the style
    ids, never on images, so no style ever straddles the splits.
    """
    unique = sorted(set(style_ids))
    ranked = sorted(unique, key=lambda s: hashlib.sha256(s.encode("utf-8")).hexdigest())
    n_test = max(1, int(len(unique) / 10 + 0.5))
    test = set(ranked[:n_test])
    return {s: ("test" if s in test else "train") for s in unique}


def build_manifest(records: list[TripletRecord], out_path: str | Path) -> None:
    """Validate and write one JSON object per line, UTF-8."""
    out_path = Path(out_path)
    seen = set()
    for record in records:
        if record.id in seen:
            raise ManifestError(f"duplicate triplet id: {record.id!r}")
        seen.add(record.id)
        for kind in ("content_path", "style_path", "stylized_path"):
            rel = getattr(record, kind)
            if not (out_path.parent / rel).exists():
                raise ManifestError(f"triplet {record.id!r}: dangling {kind} {rel!r}")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(asdict(record), sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> list[TripletRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(TripletRecord(**obj))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: bad manifest record: {exc}") from exc
    return records
