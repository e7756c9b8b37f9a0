"""Attribute scoring and bidirectional ordinal impact-score ranking.

Two halves: (1) pure pair statistics — concordant/discordant/tie counting and
the directed Somers' D ratio used to weight attribute relations; (2) scoring
front-ends — a mock scorer that reads ground truth with optional noise, and a
remote scorer that asks a chat-completion endpoint to rate attributes 0..5.

The directed ratio follows the convention that the denominator adds the ties
of the *independent* variable; the classical convention (ties of the
dependent variable) is available through the ``convention`` switch.
"""

from __future__ import annotations

import base64
import io
import os
import random
import re
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConfigError, CredentialError, DataError, ScoringParseError,
                     ShapeError, TransportError)
from .numcore import Rng

MAX_SCORE = 5

_SYSTEM_PROMPT = ("You are a careful visual rater. Answer with scores only, "
                  "in the exact format requested.")


@dataclass(frozen=True)
class ScoreRecord:
    """Per-sample ordinal attribute scores in {0..5}."""

    sample_id: int
    scores: tuple[int, ...]

    def __post_init__(self):
        if any(not (0 <= s <= MAX_SCORE) for s in self.scores):
            raise DataError(f"scores outside 0..{MAX_SCORE}: {self.scores}")


@dataclass(frozen=True)
class PairCounts:
    """Classification of all m(m-1)/2 unordered index pairs of two vectors."""

    concordant: int
    discordant: int
    ties_first: int    # tied on the first vector only
    ties_second: int   # tied on the second vector only
    ties_both: int

    def total(self) -> int:
        return (self.concordant + self.discordant + self.ties_first
                + self.ties_second + self.ties_both)


@dataclass(frozen=True)
class RelationEstimate:
    """Directed impact scores for one attribute pair."""

    s_ij: float
    s_ji: float
    support: int


@dataclass
class PredictorConfig:
    """How attribute scores are produced: mock oracle or remote endpoint."""

    kind: str = "mock"
    endpoint: str = ""
    model: str = ""
    api_key_env: str = ""
    max_retries: int = 3
    timeout: float = 30.0
    max_parallel: int = 4
    mock_noise: float = 0.0

    def __post_init__(self):
        if self.kind not in ("mock", "remote"):
            raise ConfigError(f"unknown predictor kind {self.kind!r}")
        if self.kind == "remote" and (not self.endpoint or not self.model):
            raise ConfigError("remote predictor needs endpoint and model")
        if not 0.0 <= self.mock_noise <= 1.0:
            raise ConfigError("mock_noise must lie in [0, 1]")
        if self.max_retries < 0 or self.timeout <= 0 or self.max_parallel < 1:
            raise ConfigError("retries/timeout/parallelism out of range")


# ---------------------------------------------------------------------------
# pair statistics


def count_pairs(x, y) -> PairCounts:
    """Classify all unordered pairs of (x_a, y_a), (x_b, y_b) observations.

    Runs on a dense-rank contingency table with 2-D prefix sums, so the cost
    is O(m + K^2) for K distinct values instead of O(m^2).
    """
    x = np.asarray(x).ravel()
    y = np.asarray(y).ravel()
    if x.size != y.size:
        raise ShapeError(f"count_pairs: lengths {x.size} vs {y.size}")
    m = x.size
    if m < 2:
        return PairCounts(0, 0, 0, 0, 0)
    xr = np.unique(x, return_inverse=True)[1]
    yr = np.unique(y, return_inverse=True)[1]
    table = np.zeros((int(xr.max()) + 1, int(yr.max()) + 1), dtype=np.int64)
    np.add.at(table, (xr, yr), 1)

    cum2 = table.cumsum(axis=0).cumsum(axis=1)
    less_both = np.zeros_like(table)
    less_both[1:, 1:] = cum2[:-1, :-1]
    concordant = int((table * less_both).sum())

    row_less = np.zeros_like(table)
    row_less[1:, :] = table.cumsum(axis=0)[:-1, :]
    suffix = row_less[:, ::-1].cumsum(axis=1)[:, ::-1] - row_less
    discordant = int((table * suffix).sum())

    n_x = table.sum(axis=1)
    n_y = table.sum(axis=0)
    both = int((table * (table - 1) // 2).sum())
    ties_first = int((n_x * (n_x - 1) // 2).sum()) - both
    ties_second = int((n_y * (n_y - 1) // 2).sum()) - both
    return PairCounts(concordant, discordant, ties_first, ties_second, both)


def somers_d(counts: PairCounts, direction: str = "ij",
             convention: str = "paper") -> float:
    """Directed association in [-1, 1]; all-tied input yields 0 by convention.

    direction "ij" treats the first vector as independent.  The "paper"
    convention adds the independent variable's ties to the denominator; the
    "classical" convention adds the dependent variable's ties instead.
    """
    if direction not in ("ij", "ji"):
        raise ConfigError(f"unknown direction {direction!r}")
    if convention not in ("paper", "classical"):
        raise ConfigError(f"unknown convention {convention!r}")
    first_indep = direction == "ij"
    use_first_ties = first_indep if convention == "paper" else not first_indep
    ties = counts.ties_first if use_first_ties else counts.ties_second
    denom = counts.concordant + counts.discordant + ties
    if denom == 0:
        return 0.0
    return (counts.concordant - counts.discordant) / denom


def relation_estimate(x, y, convention: str = "paper") -> RelationEstimate:
    counts = count_pairs(x, y)
    return RelationEstimate(
        s_ij=somers_d(counts, "ij", convention),
        s_ji=somers_d(counts, "ji", convention),
        support=int(np.asarray(x).ravel().size),
    )


def relation_matrix(records: list[ScoreRecord], convention: str = "paper") -> np.ndarray:
    """Signed n x n impact-score matrix; entry (i, j) has i as the independent
    attribute.  Diagonal is 0 and the matrix is asymmetric in general."""
    if len(records) < 2:
        raise DataError("relation ranking needs at least 2 score records")
    widths = {len(r.scores) for r in records}
    if len(widths) != 1:
        raise DataError("score records disagree on attribute count")
    cols = np.array([r.scores for r in records], dtype=np.int64)
    return relation_matrix_from_columns(cols, convention=convention)


def relation_matrix_from_columns(cols: np.ndarray, convention: str = "paper") -> np.ndarray:
    """Same as relation_matrix, on an (m x n) matrix of score columns."""
    cols = np.asarray(cols)
    if cols.ndim != 2 or cols.shape[0] < 2:
        raise DataError("need an (m x n) score matrix with m >= 2")
    n = cols.shape[1]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            counts = count_pairs(cols[:, i], cols[:, j])
            out[i, j] = somers_d(counts, "ij", convention)
            out[j, i] = somers_d(counts, "ji", convention)
    return out


# ---------------------------------------------------------------------------
# scoring front-ends


def build_prompt(attribute_names, image_descriptor: str) -> str:
    """Deterministic rating instructions for one attached image."""
    names = list(attribute_names)
    if not names:
        raise ConfigError("need at least one attribute name")
    n = len(names)
    listed = "\n".join(f"  {k + 1}. {name}" for k, name in enumerate(names))
    example = "[" + ", ".join(str(k % (MAX_SCORE + 1)) for k in range(n)) + "]"
    return (
        f"Rate the attached image ({image_descriptor}).\n"
        f"Score each of the following {n} attributes with an integer "
        f"from 0 to 5, where 0 means the attribute is absent and 5 means "
        f"its strongest possible expression:\n"
        f"{listed}\n"
        f"Reply with exactly {n} integers in one bracketed, comma-separated "
        f"list in the order given, e.g. {example}, and nothing else."
    )


def mock_score(sample, noise_prob: float, rng: Rng) -> ScoreRecord:
    """Ground-truth scores, each perturbed by +-1 with probability noise_prob."""
    from .synthgen import quantize_scores  # local import avoids a cycle

    if not 0.0 <= noise_prob <= 1.0:
        raise ConfigError("noise probability must lie in [0, 1]")
    scores = quantize_scores(sample.factors).astype(np.int64)
    n = scores.size
    flips = rng.uniform(1, n)[0] < noise_prob
    signs = np.where(rng.uniform(1, n)[0] < 0.5, -1, 1)
    scores = np.where(flips, scores + signs, scores)
    scores = np.clip(scores, 0, MAX_SCORE)
    return ScoreRecord(sample_id=sample.id, scores=tuple(int(s) for s in scores))


_INT_LIST = re.compile(r"\[([^\[\]]*)\]")


def parse_score_reply(text: str, n: int) -> tuple[int, ...]:
    """Extract the first bracketed list of exactly n integers in 0..5."""
    for match in _INT_LIST.finditer(text):
        tokens = [t.strip() for t in match.group(1).split(",")]
        if len(tokens) != n:
            continue
        if not all(re.fullmatch(r"[+-]?\d+", t) for t in tokens):
            continue
        values = [int(t) for t in tokens]
        if all(0 <= v <= MAX_SCORE for v in values):
            return tuple(values)
    raise ScoringParseError(f"no bracketed list of {n} scores in reply", reply=text)


def image_to_png(image: np.ndarray, scale: int = 8) -> bytes:
    """Encode a [0,1] grayscale image as PNG, nearest-neighbor upscaled."""
    from PIL import Image

    arr = np.clip(np.asarray(image) * 255.0, 0, 255).round().astype(np.uint8)
    img = Image.fromarray(arr, mode="L")
    side = arr.shape[0] * scale
    img = img.resize((side, side), Image.NEAREST)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _request_body(cfg: PredictorConfig, prompt: str, image_png: bytes) -> dict:
    data_url = "data:image/png;base64," + base64.b64encode(image_png).decode("ascii")
    return {
        "model": cfg.model,
        "temperature": 0,
        "messages": [
            {"role": "system", "content": _SYSTEM_PROMPT},
            {"role": "user", "content": [
                {"type": "text", "text": prompt},
                {"type": "image_url", "image_url": {"url": data_url}},
            ]},
        ],
    }


def remote_score(cfg: PredictorConfig, sample_id: int, image_png: bytes,
                 attribute_names, sleeper=time.sleep) -> ScoreRecord:
    """Score one image over HTTP with retries, backoff and a hard deadline.

    Total wall time is bounded by timeout * (max_retries + 1): per-attempt
    request timeouts and backoff sleeps are both clipped to the remaining
    budget.
    """
    import requests

    if cfg.kind != "remote":
        raise ConfigError("remote_score needs a remote predictor config")
    headers = {"Content-Type": "application/json"}
    if cfg.api_key_env:
        key = os.environ.get(cfg.api_key_env)
        if not key:
            raise CredentialError(f"API key variable {cfg.api_key_env!r} is not set")
        headers["Authorization"] = f"Bearer {key}"

    names = list(attribute_names)
    body = _request_body(cfg, build_prompt(names, f"sample {sample_id}"), image_png)
    deadline = time.monotonic() + cfg.timeout * (cfg.max_retries + 1)
    backoff = min(max(cfg.timeout / 4.0, 0.05), 1.0)
    last_error: Exception | None = None

    for attempt in range(cfg.max_retries + 1):
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            break
        try:
            resp = requests.post(cfg.endpoint, json=body, headers=headers,
                                 timeout=min(cfg.timeout, remaining))
        except requests.exceptions.RequestException as exc:
            last_error = TransportError(f"sample {sample_id}: {exc}")
        else:
            if resp.status_code in (401, 403):
                raise CredentialError(
                    f"sample {sample_id}: endpoint rejected credentials "
                    f"({resp.status_code})")
            if resp.status_code >= 500:
                last_error = TransportError(
                    f"sample {sample_id}: server error {resp.status_code}")
            elif resp.status_code != 200:
                raise TransportError(
                    f"sample {sample_id}: unexpected status {resp.status_code}")
            else:
                try:
                    content = resp.json()["choices"][0]["message"]["content"]
                except (KeyError, IndexError, TypeError, ValueError) as exc:
                    last_error = ScoringParseError(
                        f"sample {sample_id}: malformed response envelope: {exc}",
                        reply=resp.text)
                else:
                    try:
                        return ScoreRecord(sample_id=sample_id,
                                           scores=parse_score_reply(content, len(names)))
                    except ScoringParseError as exc:
                        last_error = ScoringParseError(
                            f"sample {sample_id}: {exc}", reply=content)
        if attempt < cfg.max_retries:
            delay = backoff * (2 ** attempt) + random.uniform(0, backoff / 4)
            sleeper(max(0.0, min(delay, deadline - time.monotonic())))

    if isinstance(last_error, ScoringParseError):
        raise last_error
    raise last_error or TransportError(f"sample {sample_id}: deadline exhausted")


# ---------------------------------------------------------------------------
# scores file: CSV with header sample_id,attr_0,...,attr_{n-1}


def write_scores_csv(records: list[ScoreRecord], path: str) -> None:
    if not records:
        raise DataError("refusing to write an empty scores file")
    n = len(records[0].scores)
    header = "sample_id," + ",".join(f"attr_{k}" for k in range(n))
    lines = [header]
    for r in sorted(records, key=lambda r: r.sample_id):
        lines.append(str(r.sample_id) + "," + ",".join(str(s) for s in r.scores))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_scores_csv(path: str) -> list[ScoreRecord]:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("sample_id,"):
        raise DataError(f"{path}: not a scores file")
    records = []
    for ln in lines[1:]:
        parts = ln.split(",")
        records.append(ScoreRecord(sample_id=int(parts[0]),
                                   scores=tuple(int(p) for p in parts[1:])))
    return records


def write_relation_csv(matrix: np.ndarray, path: str) -> None:
    with open(path, "w") as fh:
        for row in np.asarray(matrix):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_relation_csv(path: str) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for ln in fh:
            ln = ln.strip()
            if ln:
                rows.append([float(v) for v in ln.split(",")])
    matrix = np.array(rows)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DataError(f"{path}: relation matrix is not square")
    return matrix
