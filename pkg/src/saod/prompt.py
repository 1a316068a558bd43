"""Per-image class prompts from a language-model predictor.

A predictor receives a fixed multiple-choice instruction and replies with
free text. The reply is parsed into a set of class ids, optionally merged
with the classes of the image's sparse annotations, and persisted once per
corpus before training.

Two predictor bindings are provided: :class:`RemotePredictor` talks JSON
over HTTP, :class:`MockPredictor` answers from a table or simulates a
predictor of configurable accuracy.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import re
import socket
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

DOTA_CLASSES = (
    "plane", "baseball-diamond", "bridge", "ground-track-field", "small-vehicle",
    "large-vehicle", "ship", "soccer-ball-field", "tennis-court", "basketball-court",
    "storage-tank", "roundabout", "harbor", "swimming-pool", "helicopter",
)

ENV_URL = "SAOD_PREDICTOR_URL"
ENV_TOKEN = "SAOD_PREDICTOR_TOKEN"
ENV_TIMEOUT = "SAOD_PREDICTOR_TIMEOUT"


@dataclass(frozen=True)
class ClassPrompt:
    """Foreground classes predicted for one scene; empty means "none"."""

    scene_id: int
    classes: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "classes", frozenset(int(c) for c in self.classes))
        if any(c < 0 for c in self.classes):
            raise ValueError(f"negative class id in {sorted(self.classes)}")


class Outcome(enum.Enum):
    NONE = "none"
    EXACT = "exact"
    PARTLY = "partly"
    ERROR = "error"


@dataclass(frozen=True)
class PromptStats:
    none_count: int = 0
    exact_count: int = 0
    partly_count: int = 0
    error_count: int = 0

    @property
    def total(self) -> int:
        return self.none_count + self.exact_count + self.partly_count + self.error_count

    def as_row(self) -> dict[str, int]:
        return {"none": self.none_count, "exact": self.exact_count,
                "partly": self.partly_count, "errors": self.error_count}


class ParsedResponse(NamedTuple):
    classes: frozenset[int]
    unrecognized: int
    warning: bool


# errors ---------------------------------------------------------------------

class PredictorError(RuntimeError):
    """Base class for predictor transport and protocol failures."""


class PredictorTimeout(PredictorError):
    pass


class PredictorHTTPError(PredictorError):
    def __init__(self, status: int, message: str = ""):
        super().__init__(f"HTTP {status}: {message}".strip())
        self.status = status


class PredictorUnavailable(PredictorError):
    """Connection refused, DNS failure and similar."""


class MalformedResponse(PredictorError):
    pass


# instruction and parsing ----------------------------------------------------

def build_instruction(category_names: Sequence[str]) -> str:
    if not category_names:
        raise ValueError("at least one category name is required")
    names = ", ".join(category_names)
    return (f"Choose categories presented in the image: {names}, none. "
            "Choose one or several classes. Answer in one word or a short phrase.")


_SPLIT = re.compile(r"[,;\n]|\band\b|&", flags=re.IGNORECASE)


def _norm(token: str) -> str:
    token = token.strip().strip(".!?:\"'()[]{} \t").lower()
    return re.sub(r"[\s_]+", "-", token)


def parse_response(text: str, category_names: Sequence[str]) -> ParsedResponse:
    """Lenient parse of a free-text reply into class ids.

    Tokens are split on commas, semicolons, newlines and the word "and",
    then matched case-insensitively against the category names. A bare
    "none" gives the empty set. Anything else is ignored but counted; a
    reply with neither classes nor "none" sets ``warning``.
    """
    lookup = {_norm(n): i for i, n in enumerate(category_names)}
    found: set[int] = set()
    unknown = 0
    saw_none = False
    for raw in _SPLIT.split(text or ""):
        tok = _norm(raw)
        if not tok:
            continue
        if tok in lookup:
            found.add(lookup[tok])
        elif tok == "none":
            saw_none = True
        else:
            unknown += 1
    warning = not found and not saw_none
    if warning:
        log.warning("unparseable predictor reply %r", text)
    return ParsedResponse(frozenset(found), unknown, warning)


def class_names_text(classes: Iterable[int], category_names: Sequence[str]) -> str:
    names = [category_names[c] for c in sorted(classes)]
    return ", ".join(names) if names else "none"


# predictors -----------------------------------------------------------------

class Predictor(Protocol):
    def predict(self, scene_id: int, instruction: str, scene_ref: Mapping) -> str:
        """Return the raw text answer for one scene."""


class MockPredictor:
    """Deterministic stand-in for a remote predictor.

    Answers come from ``answers`` when the scene id is listed there.
    Otherwise, if ``truth`` is given, the mock returns the true class set
    with probability ``accuracy`` and a corrupted set otherwise: one class
    dropped, one wrong class added, or a wrong class swapped in. The draw
    depends only on ``(seed, scene_id)``.
    """

    def __init__(self, category_names: Sequence[str], answers: Mapping[int, str | Iterable] | None = None,
                 truth: Mapping[int, Iterable[int]] | None = None, accuracy: float = 1.0, seed: int = 0):
        if not 0.0 <= accuracy <= 1.0:
            raise ValueError(f"accuracy must be in [0, 1], got {accuracy}")
        self.names = list(category_names)
        self.answers = dict(answers or {})
        self.truth = {k: frozenset(v) for k, v in (truth or {}).items()}
        self.accuracy = accuracy
        self.seed = seed

    def predict(self, scene_id: int, instruction: str, scene_ref: Mapping | None = None) -> str:
        if scene_id in self.answers:
            ans = self.answers[scene_id]
            if isinstance(ans, str):
                return ans
            return ", ".join(sorted(ans)) if ans else "none"
        if scene_id not in self.truth:
            raise MalformedResponse(f"mock has no answer for scene {scene_id}")
        return class_names_text(self.simulate(scene_id), self.names)

    def simulate(self, scene_id: int) -> frozenset[int]:
        rng = np.random.default_rng((self.seed, scene_id, 0xC1A55))
        true = self.truth[scene_id]
        if rng.random() < self.accuracy:
            return true
        absent = [c for c in range(len(self.names)) if c not in true]
        present = sorted(true)
        kind = rng.integers(3)
        if kind == 0 and present:
            drop = present[rng.integers(len(present))]
            return true - {drop}
        if absent and (kind == 1 or not present):
            return true | {absent[rng.integers(len(absent))]}
        if absent and present:
            drop = present[rng.integers(len(present))]
            return (true - {drop}) | {absent[rng.integers(len(absent))]}
        return frozenset(present[:-1])


class RemotePredictor:
    """JSON-over-HTTP predictor client.

    Request body: ``{"scene_id": int, "instruction": str, "scene": {...}}``.
    Expected reply: ``{"answer": str}``. Timeouts, connection failures and
    5xx replies are retried up to ``retries`` extra times.
    """

    def __init__(self, endpoint: str, token: str | None = None, timeout: float = 30.0,
                 retries: int = 2, backoff: float = 0.5):
        if not endpoint:
            raise ValueError("predictor endpoint URL is empty")
        self.endpoint = endpoint
        self.token = token
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    @classmethod
    def from_env(cls, endpoint: str | None = None, **kwargs) -> "RemotePredictor":
        endpoint = endpoint or os.environ.get(ENV_URL, "")
        kwargs.setdefault("token", os.environ.get(ENV_TOKEN))
        if ENV_TIMEOUT in os.environ:
            kwargs.setdefault("timeout", float(os.environ[ENV_TIMEOUT]))
        return cls(endpoint, **kwargs)

    def _post(self, body: bytes) -> bytes:
        req = urllib.request.Request(self.endpoint, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        if self.token:
            req.add_header("Authorization", f"Bearer {self.token}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.read()
        except urllib.error.HTTPError as exc:
            raise PredictorHTTPError(exc.code, exc.reason) from exc
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                raise PredictorTimeout(str(exc.reason)) from exc
            raise PredictorUnavailable(str(exc.reason)) from exc
        except (socket.timeout, TimeoutError) as exc:
            raise PredictorTimeout(str(exc)) from exc

    def predict(self, scene_id: int, instruction: str, scene_ref: Mapping | None = None) -> str:
        body = json.dumps({"scene_id": scene_id, "instruction": instruction,
                           "scene": dict(scene_ref or {})}).encode()
        last: PredictorError | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                raw = self._post(body)
            except PredictorHTTPError as exc:
                if exc.status < 500:
                    raise
                last = exc
                continue
            except (PredictorTimeout, PredictorUnavailable) as exc:
                last = exc
                continue
            try:
                reply = json.loads(raw)
                answer = reply["answer"]
            except (ValueError, KeyError, TypeError) as exc:
                raise MalformedResponse(f"bad reply body {raw[:200]!r}") from exc
            if not isinstance(answer, str):
                raise MalformedResponse(f"answer is not a string: {answer!r}")
            return answer
        assert last is not None
        raise last


def scene_reference(scene) -> dict:
    return {"scene_id": scene.id, "grid": list(scene.grid)}


def query_predictor(client: Predictor, scene, category_names: Sequence[str]) -> ClassPrompt:
    """Ask ``client`` about one scene; transport errors propagate."""
    instruction = build_instruction(category_names)
    text = client.predict(scene.id, instruction, scene_reference(scene))
    return ClassPrompt(scene.id, parse_response(text, category_names).classes)


def query_corpus(client: Predictor, scenes, category_names: Sequence[str],
                 jobs: int = 1) -> dict[int, ClassPrompt]:
    """Query every scene with at most ``jobs`` requests in flight."""
    if jobs <= 1:
        return {s.id: query_predictor(client, s, category_names) for s in scenes}
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        prompts = list(pool.map(lambda s: query_predictor(client, s, category_names), scenes))
    return {p.scene_id: p for p in prompts}


# refinement and statistics --------------------------------------------------

def refine_prompt(pred: ClassPrompt, sparse) -> ClassPrompt:
    """Union the prediction with the classes of the kept annotations.

    Scenes without kept annotations are treated as unlabeled and keep the
    prediction unchanged.
    """
    if pred.scene_id != sparse.scene_id:
        raise ValueError(f"scene id mismatch: prompt {pred.scene_id} vs annotations {sparse.scene_id}")
    if not sparse.kept:
        return pred
    return ClassPrompt(pred.scene_id, pred.classes | {a.class_id for a in sparse.kept})


def classify_prediction(pred: Iterable[int], gt: Iterable[int]) -> Outcome:
    pred, gt = frozenset(pred), frozenset(gt)
    if not pred and not gt:
        return Outcome.NONE
    if pred and pred == gt:
        return Outcome.EXACT
    if pred and pred < gt:
        return Outcome.PARTLY
    return Outcome.ERROR


def compute_stats(predictions: Mapping[int, ClassPrompt | Iterable[int]],
                  ground_truth: Mapping[int, Iterable[int]]) -> PromptStats:
    """Count outcomes over a corpus; every GT scene needs a prediction."""
    counts = {o: 0 for o in Outcome}
    for sid in sorted(ground_truth):
        if sid not in predictions:
            raise ValueError(f"no prediction for scene {sid}")
        pred = predictions[sid]
        pred = pred.classes if isinstance(pred, ClassPrompt) else pred
        counts[classify_prediction(pred, ground_truth[sid])] += 1
    return PromptStats(counts[Outcome.NONE], counts[Outcome.EXACT],
                       counts[Outcome.PARTLY], counts[Outcome.ERROR])


def gt_prompts(scenes) -> dict[int, ClassPrompt]:
    return {s.id: ClassPrompt(s.id, s.class_set()) for s in scenes}


def refine_all(prompts: Mapping[int, ClassPrompt], sparse: Iterable) -> dict[int, ClassPrompt]:
    by_id = {a.scene_id: a for a in sparse}
    return {sid: refine_prompt(p, by_id[sid]) if sid in by_id else p for sid, p in prompts.items()}


def format_stats_table(rows: Mapping[str, PromptStats]) -> str:
    lines = [f"{'label rate':>12} {'none':>6} {'exact':>6} {'partly':>6} {'errors':>6}"]
    for label, st in rows.items():
        lines.append(f"{label:>12} {st.none_count:>6} {st.exact_count:>6} "
                     f"{st.partly_count:>6} {st.error_count:>6}")
    return "\n".join(lines)


# persistence ----------------------------------------------------------------

def prompts_to_json(prompts: Mapping[int, ClassPrompt], category_names: Sequence[str]) -> str:
    doc = {
        "format": "saod-prompts",
        "version": 1,
        "categories": list(category_names),
        "prompts": {str(sid): sorted(category_names[c] for c in prompts[sid].classes)
                    for sid in sorted(prompts)},
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def prompts_from_json(text: str, category_names: Sequence[str] | None = None) -> dict[int, ClassPrompt]:
    doc = json.loads(text)
    names = list(category_names or doc["categories"])
    index = {n: i for i, n in enumerate(names)}
    out = {}
    for sid, cls_names in doc["prompts"].items():
        try:
            out[int(sid)] = ClassPrompt(int(sid), {index[n] for n in cls_names})
        except KeyError as exc:
            raise ValueError(f"unknown class name {exc} in prompt file") from exc
    return out
