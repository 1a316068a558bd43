import json

import numpy as np
import pytest

from saod.scene import CategorySpec, generate_corpus, sparsify_corpus
from saod.store import (FormatError, config_hash, load_annotations, load_corpus, save_annotations,
                        save_corpus)

SPECS = [CategorySpec(0, "a", 2.0, (2.0, 4.0), 0.7), CategorySpec(1, "b", 1.0, (3.0, 5.0))]


@pytest.fixture
def scenes():
    return generate_corpus(SPECS, 5, 4.0, seed=2, grid=(9, 11), first_id=40)


class TestCorpus:
    def test_round_trip_is_exact(self, scenes, tmp_path):
        save_corpus(tmp_path, scenes, SPECS, meta={"seed": 2})
        back, specs, meta = load_corpus(tmp_path)
        assert specs == SPECS and meta == {"seed": 2}
        for s, b in zip(scenes, back):
            assert (b.id, b.grid, b.num_classes) == (s.id, s.grid, s.num_classes)
            assert b.features.tobytes() == s.features.tobytes()
            assert b.instances == s.instances

    def test_hash_tracks_content(self, scenes, tmp_path):
        h1 = save_corpus(tmp_path / "a", scenes, SPECS)
        h2 = save_corpus(tmp_path / "b", scenes, SPECS)
        h3 = save_corpus(tmp_path / "c", scenes[:-1], SPECS)
        assert h1 == h2 != h3

    def test_wrong_format(self, tmp_path):
        (tmp_path / "corpus.json").write_text(json.dumps({"format": "other"}))
        with pytest.raises(FormatError):
            load_corpus(tmp_path)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_corpus(tmp_path)


class TestAnnotations:
    def test_round_trip_keeps_identity(self, scenes, tmp_path):
        sparse = sparsify_corpus(scenes, 0.4, seed=1)
        save_annotations(tmp_path / "a.json", sparse, {"rate": 0.4})
        back, meta = load_annotations(tmp_path / "a.json", scenes)
        assert meta == {"rate": 0.4}
        for a, b, s in zip(sparse, back, scenes):
            assert b == a
            assert all(any(k is inst for inst in s.instances) for k in b.kept)

    def test_foreign_scene(self, scenes, tmp_path):
        save_annotations(tmp_path / "a.json", sparsify_corpus(scenes, 0.4), {})
        other = generate_corpus(SPECS, 5, 4.0, seed=2, grid=(9, 11))
        with pytest.raises(FormatError):
            load_annotations(tmp_path / "a.json", other)

    def test_bad_index(self, scenes, tmp_path):
        save_annotations(tmp_path / "a.json", sparsify_corpus(scenes, 0.4), {})
        doc = json.loads((tmp_path / "a.json").read_text())
        doc["scenes"]["40"]["kept_indices"] = [999]
        (tmp_path / "a.json").write_text(json.dumps(doc))
        with pytest.raises(FormatError):
            load_annotations(tmp_path / "a.json", scenes)


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 1.5})
    assert len(config_hash({})) == 64 and np.all([c in "0123456789abcdef" for c in config_hash({})])
