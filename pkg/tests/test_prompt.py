import itertools
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from saod.geometry import OrientedBox
from saod.prompt import (DOTA_CLASSES, ClassPrompt, MalformedResponse, MockPredictor, Outcome,
                         PredictorHTTPError, PredictorTimeout, PredictorUnavailable, PromptStats,
                         RemotePredictor, build_instruction, classify_prediction, compute_stats,
                         format_stats_table, parse_response, prompts_from_json, prompts_to_json,
                         query_corpus, query_predictor, refine_all, refine_prompt)
from saod.scene import Annotation, CategorySpec, Scene, SparseAnnotations, generate_corpus, sparsify_corpus

NAMES = ["plane", "ship", "small-vehicle", "harbor"]


def subsets(n):
    return [frozenset(s) for r in range(n + 1) for s in itertools.combinations(range(n), r)]


def classify_by_definition(pred, gt):
    """Outcome from the four membership predicates, evaluated independently."""
    checks = {
        Outcome.NONE: not pred and not gt,
        Outcome.EXACT: bool(gt) and pred == gt,
        Outcome.PARTLY: bool(pred) and pred < gt,
        Outcome.ERROR: bool(pred - gt) or (not pred and bool(gt)),
    }
    hits = [o for o, ok in checks.items() if ok]
    assert len(hits) == 1, (pred, gt, hits)
    return hits[0]


ALLOWED = {
    Outcome.NONE: {Outcome.NONE},
    Outcome.EXACT: {Outcome.EXACT},
    Outcome.PARTLY: {Outcome.PARTLY, Outcome.EXACT},
    Outcome.ERROR: {Outcome.ERROR, Outcome.PARTLY, Outcome.EXACT},
}


def refinement_error_counts(rates, n_scenes=1000, accuracy=0.5, seed=0):
    specs = [CategorySpec(i, n, f, (2.0, 4.0)) for i, (n, f) in enumerate(zip(NAMES, [6, 3, 2, 1]))]
    scenes = generate_corpus(specs, n_scenes, 1.0, seed, grid=(16, 16))
    mock = MockPredictor(NAMES, truth={s.id: s.class_set() for s in scenes}, accuracy=accuracy, seed=seed)
    raw = query_corpus(mock, scenes, NAMES)
    truth = {s.id: s.class_set() for s in scenes}
    counts = []
    for rate in rates:
        refined = refine_all(raw, sparsify_corpus(scenes, rate, seed=seed))
        counts.append(compute_stats(refined, truth).error_count)
    return counts


class TestInstruction:
    def test_template(self):
        text = build_instruction(DOTA_CLASSES)
        assert text == ("Choose categories presented in the image: " + ", ".join(DOTA_CLASSES)
                        + ", none. Choose one or several classes. Answer in one word or a short phrase.")
        assert len(DOTA_CLASSES) == 15

    def test_single(self):
        assert ": ship, none. " in build_instruction(["ship"])

    def test_stable(self):
        assert build_instruction(NAMES) == build_instruction(list(NAMES))

    def test_empty(self):
        with pytest.raises(ValueError):
            build_instruction([])


class TestParseResponse:
    @pytest.mark.parametrize("text,expected", [
        ("plane, ship", {0, 1}),
        ("None", set()),
        ("Plane and small-vehicle.", {0, 2}),
        ("SHIP;\nharbor", {1, 3}),
        ("small vehicle & plane", {0, 2}),
    ])
    def test_fixtures(self, text, expected):
        assert parse_response(text, NAMES).classes == expected

    def test_unknown_tokens_counted(self):
        r = parse_response("plane, tree, cloud", NAMES)
        assert r.classes == {0} and r.unrecognized == 2 and not r.warning

    def test_unparseable_warns(self):
        r = parse_response("I cannot tell", NAMES)
        assert r.classes == frozenset() and r.warning

    def test_none_does_not_warn(self):
        assert not parse_response("none", NAMES).warning


class TestClassifyPrediction:
    def test_one_case_per_outcome(self):
        assert classify_prediction(set(), set()) is Outcome.NONE
        assert classify_prediction({1}, {1, 0}) is Outcome.PARTLY
        assert classify_prediction({1, 3}, {1}) is Outcome.ERROR
        assert classify_prediction({2}, {2}) is Outcome.EXACT
        assert classify_prediction(set(), {2}) is Outcome.ERROR

    def test_exhaustive_partition(self):
        pairs = list(itertools.product(subsets(4), repeat=2))
        assert len(pairs) == 256
        for pred, gt in pairs:
            assert classify_prediction(pred, gt) is classify_by_definition(pred, gt)

    def test_refinement_only_improves(self):
        for pred, gt in itertools.product(subsets(4), repeat=2):
            before = classify_prediction(pred, gt)
            for ann in subsets(4):
                if not ann <= gt:
                    continue
                kept = tuple(Annotation(c, OrientedBox(1, 1, 1, 1)) for c in sorted(ann))
                refined = refine_prompt(ClassPrompt(0, pred), SparseAnnotations(0, kept, 0))
                assert classify_prediction(refined.classes, gt) in ALLOWED[before]


class TestRefinePrompt:
    def sparse(self, classes, sid=0):
        return SparseAnnotations(sid, tuple(Annotation(c, OrientedBox(1, 1, 1, 1)) for c in classes), 0)

    def test_union(self):
        assert refine_prompt(ClassPrompt(0, {1}), self.sparse([0])).classes == {0, 1}

    def test_unlabeled_unchanged(self):
        p = ClassPrompt(0, {1})
        assert refine_prompt(p, self.sparse([])) == p

    def test_empty_prediction(self):
        assert refine_prompt(ClassPrompt(0, set()), self.sparse([3])).classes == {3}

    def test_superset_and_idempotent(self):
        for pred, ann in itertools.product(subsets(4), repeat=2):
            sp = self.sparse(sorted(ann))
            once = refine_prompt(ClassPrompt(0, pred), sp)
            assert once.classes >= pred and once.classes >= ann
            assert refine_prompt(once, sp) == once

    def test_scene_mismatch(self):
        with pytest.raises(ValueError):
            refine_prompt(ClassPrompt(1, {0}), self.sparse([0], sid=2))


class TestStats:
    def test_hand_fixture(self):
        preds = {0: set(), 1: {0}, 2: {0}, 3: {2}}
        gt = {0: set(), 1: {0}, 2: {0, 1}, 3: {1}}
        st = compute_stats(preds, gt)
        assert st == PromptStats(1, 1, 1, 1)
        assert st.total == 4

    def test_all_correct(self):
        gt = {i: {i % 3} for i in range(10)}
        assert compute_stats({k: ClassPrompt(k, v) for k, v in gt.items()}, gt).error_count == 0

    def test_missing_prediction(self):
        with pytest.raises(ValueError):
            compute_stats({}, {0: {1}})

    def test_errors_fall_with_refinement_rate(self):
        counts = refinement_error_counts([0.0, 0.01, 0.02, 0.05, 0.10])
        assert all(a >= b for a, b in zip(counts, counts[1:]))
        assert counts[-1] < counts[0]

    def test_table(self):
        text = format_stats_table({"5%": PromptStats(1, 2, 3, 4)})
        assert "errors" in text and text.splitlines()[1].split() == ["5%", "1", "2", "3", "4"]


class TestMockPredictor:
    def test_passthrough(self):
        scene = Scene(7, (4, 4), None, [], 4)
        mock = MockPredictor(NAMES, answers={7: {"plane", "ship"}})
        assert query_predictor(mock, scene, NAMES) == ClassPrompt(7, {0, 1})

    def test_none_reply(self):
        mock = MockPredictor(NAMES, answers={1: "none"})
        assert query_predictor(mock, Scene(1, (2, 2), None, [], 4), NAMES).classes == frozenset()

    def test_accuracy_rate(self):
        truth = {i: {i % 4, (i + 1) % 4} for i in range(4000)}
        mock = MockPredictor(NAMES, truth=truth, accuracy=0.9, seed=3)
        hits = sum(mock.simulate(i) == frozenset(truth[i]) for i in truth)
        assert abs(hits / 4000 - 0.9) < 0.02

    def test_deterministic_per_scene(self):
        truth = {i: {1} for i in range(50)}
        a = MockPredictor(NAMES, truth=truth, accuracy=0.5, seed=1)
        b = MockPredictor(NAMES, truth={i: {1} for i in reversed(range(50))}, accuracy=0.5, seed=1)
        assert [a.simulate(i) for i in range(50)] == [b.simulate(i) for i in range(50)]

    def test_wrong_answers_differ(self):
        truth = {i: {0, 2} for i in range(200)}
        mock = MockPredictor(NAMES, truth=truth, accuracy=0.0)
        assert all(mock.simulate(i) != frozenset({0, 2}) for i in truth)

    def test_unknown_scene(self):
        with pytest.raises(MalformedResponse):
            MockPredictor(NAMES).predict(5, "x")

    def test_bad_accuracy(self):
        with pytest.raises(ValueError):
            MockPredictor(NAMES, accuracy=1.5)


class TestPersistence:
    def test_round_trip(self):
        prompts = {3: ClassPrompt(3, {2, 0}), 1: ClassPrompt(1, set())}
        text = prompts_to_json(prompts, NAMES)
        doc = json.loads(text)
        assert doc["prompts"]["3"] == ["plane", "small-vehicle"]
        assert doc["prompts"]["1"] == []
        assert prompts_from_json(text) == prompts

    def test_unknown_name(self):
        text = json.dumps({"categories": NAMES, "prompts": {"0": ["tree"]}})
        with pytest.raises(ValueError):
            prompts_from_json(text)


class _Handler(BaseHTTPRequestHandler):
    script: list = []
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((body, self.headers.get("Authorization")))
        action = type(self).script.pop(0) if type(self).script else ("ok", "plane")
        kind, payload = action
        if kind == "sleep":
            time.sleep(payload)
            kind, payload = "ok", "ship"
        if kind == "status":
            self.send_response(payload)
            self.end_headers()
            return
        data = json.dumps({"answer": payload}).encode() if kind == "ok" else payload
        self.send_response(200)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    _Handler.script, _Handler.seen = [], []
    srv = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv, f"http://127.0.0.1:{srv.server_address[1]}/predict"
    srv.shutdown()
    srv.server_close()


class TestRemotePredictor:
    def test_success_and_auth(self, server):
        _, url = server
        _Handler.script = [("ok", "plane, harbor")]
        client = RemotePredictor(url, token="secret", backoff=0.0)
        p = query_predictor(client, Scene(4, (8, 8), None, [], 4), NAMES)
        assert p == ClassPrompt(4, {0, 3})
        body, auth = _Handler.seen[0]
        assert body["scene_id"] == 4 and body["instruction"] == build_instruction(NAMES)
        assert auth == "Bearer secret"

    def test_retries_server_errors(self, server):
        _, url = server
        _Handler.script = [("status", 503), ("status", 500), ("ok", "ship")]
        assert RemotePredictor(url, retries=2, backoff=0.0).predict(0, "q") == "ship"
        assert len(_Handler.seen) == 3

    def test_gives_up_after_retries(self, server):
        _, url = server
        _Handler.script = [("status", 502)] * 3
        with pytest.raises(PredictorHTTPError) as exc:
            RemotePredictor(url, retries=2, backoff=0.0).predict(0, "q")
        assert exc.value.status == 502

    def test_client_error_not_retried(self, server):
        _, url = server
        _Handler.script = [("status", 401)]
        with pytest.raises(PredictorHTTPError):
            RemotePredictor(url, retries=3, backoff=0.0).predict(0, "q")
        assert len(_Handler.seen) == 1

    def test_malformed_body(self, server):
        _, url = server
        _Handler.script = [("raw", b"not json")]
        with pytest.raises(MalformedResponse):
            RemotePredictor(url, backoff=0.0).predict(0, "q")

    def test_timeout(self, server):
        _, url = server
        _Handler.script = [("sleep", 1.0)]
        with pytest.raises(PredictorTimeout):
            RemotePredictor(url, timeout=0.2, retries=0).predict(0, "q")

    def test_unreachable(self):
        with pytest.raises(PredictorUnavailable):
            RemotePredictor("http://127.0.0.1:9/x", timeout=1.0, retries=1, backoff=0.0).predict(0, "q")

    def test_from_env(self, monkeypatch):
        monkeypatch.setenv("SAOD_PREDICTOR_URL", "http://example.invalid/p")
        monkeypatch.setenv("SAOD_PREDICTOR_TOKEN", "t")
        monkeypatch.setenv("SAOD_PREDICTOR_TIMEOUT", "7")
        c = RemotePredictor.from_env()
        assert (c.endpoint, c.token, c.timeout) == ("http://example.invalid/p", "t", 7.0)

    def test_empty_endpoint(self, monkeypatch):
        monkeypatch.delenv("SAOD_PREDICTOR_URL", raising=False)
        with pytest.raises(ValueError):
            RemotePredictor.from_env()

    def test_parallel_queries(self, server):
        _, url = server
        scenes = [Scene(i, (4, 4), None, [], 4) for i in range(6)]
        out = query_corpus(RemotePredictor(url, backoff=0.0), scenes, NAMES, jobs=3)
        assert sorted(out) == list(range(6))
        assert all(p.classes == {0} for p in out.values())
