"""Curation: reference selection vs brute force, judges, captions, manifest."""

import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from styleroute.curate import (
    JudgeUnavailable,
    JudgeVerdict,
    ManifestError,
    MockRewriter,
    MockTripletJudge,
    RemoteJudge,
    StyleSet,
    TripletDescriptor,
    TripletRecord,
    build_manifest,
    clean_caption,
    filter_triplets,
    load_manifest,
    select_style_reference,
    split_styles,
    verdict_passes,
)


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_select_reference_two_members_is_forced():
    s = StyleSet("s", [np.array([1.0, 0.0]), np.array([0.0, 1.0])])
    assert select_style_reference(s, 0, _cos) == 1
    assert select_style_reference(s, 1, _cos) == 0


def test_select_reference_three_member_example():
    # sim(1,2)=0.9, sim(1,3)=0.4 by construction
    sims = {(0, 1): 0.9, (1, 0): 0.9, (0, 2): 0.4, (2, 0): 0.4, (1, 2): 0.1, (2, 1): 0.1}
    items = [0, 1, 2]
    s = StyleSet("s", items)
    assert select_style_reference(s, 0, lambda a, b: sims[(a, b)]) == 1


def test_select_reference_never_picks_self():
    s = StyleSet("s", [np.ones(3), np.ones(3) * 2, np.array([1.0, -1.0, 0.0])])
    # self-similarity is maximal under cosine, still excluded
    for i in range(3):
        assert select_style_reference(s, i, _cos) != i


def test_select_reference_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for trial in range(30):
        n = int(rng.integers(2, 12))
        items = [rng.standard_normal(6) for _ in range(n)]
        s = StyleSet(f"s{trial}", items)
        for i in range(n):
            got = select_style_reference(s, i, _cos)
            # independent O(N^2) scan: full similarity matrix, then argmax
            sims = np.full(n, -np.inf)
            for k in range(n):
                if k != i:
                    sims[k] = _cos(items[i], items[k])
            assert got == int(np.argmax(sims))


def test_select_reference_tie_goes_to_lowest_index():
    v = np.array([1.0, 0.0])
    s = StyleSet("s", [v, v.copy(), v.copy()])
    assert select_style_reference(s, 2, _cos) == 0


def test_style_set_requires_two_members():
    with pytest.raises(ValueError):
        StyleSet("s", [np.ones(2)])


def test_mock_judge_rules():
    judge = MockTripletJudge(min_mask_iou=0.5, max_style_distance=0.5)
    ok = TripletDescriptor("circle", "circle", 0.9, 0.1)
    assert judge.judge(ok).passed
    bad_layout = judge.judge(TripletDescriptor("circle", "circle", 0.4, 0.1))
    assert not bad_layout.passed and bad_layout.reason == "layout degradation"
    mismatch = judge.judge(TripletDescriptor("square", "circle", 0.9, 0.1))
    assert not mismatch.passed and mismatch.reason == "content mismatch"
    weak = judge.judge(TripletDescriptor("circle", "circle", 0.9, 0.8))
    assert not weak.passed and weak.reason == "poor stylization"


def test_filter_partition_property():
    judge = MockTripletJudge()
    items = [
        TripletDescriptor("circle", "circle", 0.9, 0.1),
        TripletDescriptor("circle", "circle", 0.2, 0.1),
        TripletDescriptor("square", "circle", 0.9, 0.1),
    ]
    result = filter_triplets(items, judge.judge)
    assert len(result.kept) + len(result.rejected) + len(result.held) == len(items)
    assert len(result.kept) == 1 and len(result.rejected) == 2
    assert filter_triplets([], judge.judge).kept == []


def test_filter_holds_items_when_judge_unreachable():
    def broken(_):
        raise JudgeUnavailable("connection refused")

    result = filter_triplets([1, 2], broken)
    assert len(result.held) == 2 and not result.kept and not result.rejected


def test_verdict_prefix_rule():
    assert verdict_passes("YES, same style")
    assert not verdict_passes("NO")
    assert not verdict_passes("yes")  # case-sensitive
    assert not verdict_passes(" YES")
    assert not verdict_passes("The answer is YES")


class _JudgeHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        assert "images" in body and "prompt" in body
        # images must be valid base64 PNG payloads
        for b64 in body["images"]:
            raw = base64.b64decode(b64)
            assert raw[:8] == b"\x89PNG\r\n\x1a\n"
        verdict = "YES, looks consistent" if len(body["images"]) == 2 else "NO, wrong arity"
        payload = json.dumps({"verdict": verdict}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture()
def judge_server():
    server = HTTPServer(("127.0.0.1", 0), _JudgeHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


def test_remote_judge_protocol_round_trip(judge_server):
    judge = RemoteJudge(judge_server)
    imgs = [np.zeros((4, 4, 3), dtype=np.uint8), np.ones((4, 4, 3), dtype=np.uint8)]
    response = judge.ask(imgs, "same style?")
    assert verdict_passes(response)


def test_remote_judge_unreachable_raises():
    judge = RemoteJudge("http://127.0.0.1:1/unreachable", timeout=0.2)
    with pytest.raises(JudgeUnavailable):
        judge.ask([np.zeros((4, 4, 3), dtype=np.uint8)], "x")


def test_clean_caption_banned_words():
    cleaned, flagged = clean_caption("a red ball on a bright table")
    assert cleaned == "a ball on a table"
    assert not flagged


def test_clean_caption_no_banned_words_unchanged():
    cleaned, _ = clean_caption("a ball on a table")
    assert cleaned == "a ball on a table"


def test_clean_caption_empty():
    cleaned, _ = clean_caption("")
    assert cleaned == ""


def test_clean_caption_remote_failure_keeps_raw_with_flag():
    class Broken:
        def rewrite(self, caption):
            raise JudgeUnavailable("down")

    cleaned, flagged = clean_caption("a red ball", Broken())
    assert cleaned == "a red ball" and flagged


def test_rewriter_collapses_whitespace_and_punctuation():
    assert MockRewriter().rewrite("a  red   ball, on a dark, table") == "a ball, on a table"


def test_split_counting_and_purity():
    ten = [f"style-{i}" for i in range(10)]
    split = split_styles(ten)
    assert sum(1 for v in split.values() if v == "test") == 1
    assert sum(1 for v in split.values() if v == "train") == 9
    twenty = [f"style-{i}" for i in range(20)]
    assert sum(1 for v in split_styles(twenty).values() if v == "test") == 2
    # function of the style ids only
    assert split_styles(list(reversed(ten))) == split


def _records(tmp_path, n=3):
    (tmp_path / "img").mkdir(exist_ok=True)
    recs = []
    for i in range(n):
        for name in (f"c{i}.png", f"s{i}.png", f"z{i}.png"):
            (tmp_path / "img" / name).write_bytes(b"x")
        recs.append(
            TripletRecord(
                id=f"t{i}",
                content_path=f"img/c{i}.png",
                style_path=f"img/s{i}.png",
                stylized_path=f"img/z{i}.png",
                style_id=f"style{i % 2}",
                split="train",
                seed=i,
            )
        )
    return recs


def test_manifest_round_trip(tmp_path):
    records = _records(tmp_path)
    path = tmp_path / "manifest.jsonl"
    build_manifest(records, path)
    assert load_manifest(path) == records


def test_manifest_rejects_duplicates(tmp_path):
    records = _records(tmp_path)
    records.append(records[0])
    with pytest.raises(ManifestError):
        build_manifest(records, tmp_path / "m.jsonl")


def test_manifest_rejects_dangling_paths(tmp_path):
    records = _records(tmp_path)
    bad = TripletRecord("tx", "img/missing.png", records[0].style_path, records[0].stylized_path, "s", "train", 0)
    with pytest.raises(ManifestError):
        build_manifest(records + [bad], tmp_path / "m.jsonl")


def test_manifest_rejects_malformed_line(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"id": "x"}\n', encoding="utf-8")
    with pytest.raises(ManifestError):
        load_manifest(path)
