import numpy as np
import pytest

from storysynth.corpus import CorpusProfile, SYNONYMS, generate_corpus, load_manifest, parse_caption
from storysynth.errors import FormatError, NotFoundError, ParameterError
from storysynth.retrieval import (
    build_index,
    caption_tokens,
    index_hash,
    load_index,
    motion_structure_of,
    query,
    save_index,
)


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus") / "c20"
    generate_corpus(20, CorpusProfile(length=8), seed=7, out_dir=d)
    return d


@pytest.fixture(scope="module")
def index(small_corpus):
    return build_index(small_corpus)


def paraphrase(caption: str) -> str:
    """Swap every swappable word for a synonym from the fixed table."""
    reverse = {}
    for syn, canon in SYNONYMS.items():
        reverse.setdefault(canon, syn)
    return " ".join(reverse.get(w, w) for w in caption.split())


class TestBuildIndex:
    def test_one_entry_per_clip(self, small_corpus, index):
        assert len(index) == len(load_manifest(small_corpus))

    def test_rebuild_identical_hash(self, small_corpus, index):
        assert index_hash(build_index(small_corpus)) == index_hash(index)

    def test_entry_attributes_match_parse(self, index):
        for entry in index.entries:
            assert np.array_equal(np.asarray(entry["attributes"]), parse_caption(entry["caption"]))

    def test_persistence_round_trip(self, small_corpus, index, tmp_path):
        path = save_index(index, tmp_path / "index.json")
        loaded = load_index(path)
        assert index_hash(loaded) == index_hash(index)

    def test_stale_index_detected(self, small_corpus, index, tmp_path):
        path = save_index(index, tmp_path / "index.json")
        manifest = small_corpus / "manifest.jsonl"
        manifest.write_text(manifest.read_text() + "\n")
        try:
            with pytest.raises(FormatError):
                load_index(path)
        finally:
            manifest.write_text(manifest.read_text().rstrip("\n"))


class TestQuery:
    def test_self_retrieval_rank_one_score_one(self, index):
        for entry in index.entries:
            top = query(index, entry["caption"], 1)[0]
            assert top[0] == entry["clip_id"]
            assert abs(top[1] - 1.0) < 1e-9

    def test_scores_bounded_and_descending(self, index):
        results = query(index, "a red circle moves right on a black background", 20)
        scores = [s for _, s in results]
        assert all(-1.0 - 1e-9 <= s <= 1.0 + 1e-9 for s in scores)
        assert scores == sorted(scores, reverse=True)

    def test_k_larger_than_corpus_returns_all(self, index):
        assert len(query(index, "a red circle moves right on a black background", 999)) == len(index)

    def test_monotone_k_prefix(self, index):
        text = "a blue square moves up on a white background"
        top3 = query(index, text, 3)
        top5 = query(index, text, 5)
        assert top5[:3] == top3

    def test_motion_dominates_cross_appearance(self, small_corpus, index):
        # A query for a moving sprite should rank any same-motion clip above
        # any static clip even when colors disagree.
        records = load_manifest(small_corpus)
        motions = {r["clip_id"]: r["scene_params"]["motion"] for r in records}
        if "right" not in motions.values():
            pytest.skip("fixture corpus has no 'right' clip")
        results = query(index, "a red circle moves right on a black background", len(index))
        ranks = {cid: i for i, (cid, _) in enumerate(results)}
        right_ranks = [ranks[c] for c, m in motions.items() if m == "right"]
        static_ranks = [ranks[c] for c, m in motions.items() if m == "static"]
        if right_ranks and static_ranks:
            assert min(right_ranks) < min(static_ranks)

    def test_paraphrase_top3_agreement(self, index):
        hits = 0
        for entry in index.entries:
            results = query(index, paraphrase(entry["caption"]), 3)
            hits += any(cid == entry["clip_id"] for cid, _ in results)
        assert hits / len(index) >= 0.9

    def test_empty_query_rejected(self, index):
        with pytest.raises(ParameterError):
            query(index, "  ", 3)
        with pytest.raises(ParameterError):
            query(index, "a red circle", 0)


class TestMotionStructure:
    def test_round_trip_shape_and_range(self, small_corpus, index):
        entry = index.entries[0]
        depth = motion_structure_of(index, entry["clip_id"])
        assert depth.maps.shape == (8, 1, 32, 32)
        assert depth.maps.min() >= 0.0 and depth.maps.max() <= 1.0

    def test_right_clip_depth_centroid_increases(self, small_corpus, index):
        records = load_manifest(small_corpus)
        right = [r for r in records if r["scene_params"]["motion"] == "right"]
        if not right:
            pytest.skip("fixture corpus has no 'right' clip")
        depth = motion_structure_of(index, right[0]["clip_id"])
        xs = [np.nonzero(depth.maps[i, 0] > 0.5)[1].mean() for i in range(depth.length)]
        assert all(b > a for a, b in zip(xs, xs[1:]))

    def test_unknown_id(self, index):
        with pytest.raises(NotFoundError):
            motion_structure_of(index, "clip_99999")


def test_caption_tokens_plain_split():
    assert caption_tokens("A Red circle, moves right.") == ["a", "red", "circle", "moves", "right"]
