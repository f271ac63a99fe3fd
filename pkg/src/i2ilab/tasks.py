"""Deterministic scene-question-answer task family.

A scene is a handful of object slots, each a (color, shape, size) triple.
Slots are rendered to continuous feature vectors through a seeded codebook
plus small per-example noise, capped strictly below half the codebook's
minimum pairwise distance so every scene stays exactly decodable. Questions
are short token templates; answers are 1-2 tokens from a closed vocabulary.

Five query types play the role of five related datasets:

- count:   how many slots of a given color (answers "0".."3")
- exist:   is there a slot of a given shape (yes/no)
- maxcolor: color of the largest slot of a given shape
- parity:  is the number of slots of a given shape even or odd
- compare: are there strictly more slots of color A than color B (yes/no)

Every generated answer is verified against :func:`evaluate_query`, the
brute-force symbolic evaluator that is also the ground-truth oracle for all
dataset tests. Generation is a pure function of the task description.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .rng import Rng

PAD, BOS, EOS = 0, 1, 2

COLORS = ["red", "blue", "green", "yellow", "purple", "orange", "pink", "brown"]
SHAPES = ["circle", "square", "triangle", "star", "hexagon", "diamond", "cross", "heart"]
SIZES = ["small", "medium", "large"]
DIGITS = [str(i) for i in range(9)]
KEYWORDS = ["count", "exist", "maxcolor", "parity", "compare"]
JUDGMENTS = ["yes", "no", "even", "odd"]

VOCAB: list[str] = (["<pad>", "<bos>", "<eos>"] + KEYWORDS + COLORS + SHAPES
                    + SIZES + DIGITS + JUDGMENTS)
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}

MAX_SLOTS = 8
MIN_SLOTS = 2
COUNT_MAX = 3  # count answers range over 0..COUNT_MAX

# Slot-feature noise level as a fraction of the codebook's minimum pairwise
# distance. Scenes stay decodable for any value below the 0.45 hard cap.
NOISE_FRACTION = 0.14


def tokens(words: Iterable[str]) -> tuple[int, ...]:
    return tuple(TOKEN_ID[w] for w in words)


class RevokedDataError(RuntimeError):
    """A training split was accessed after its task completed."""


@dataclass(frozen=True)
class Scene:
    colors: tuple[int, ...]
    shapes: tuple[int, ...]
    sizes: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.colors)

    def signature(self) -> tuple:
        return (self.colors, self.shapes, self.sizes)


@dataclass(frozen=True)
class Example:
    features: np.ndarray          # (n_slots, feature_dim) float64
    question: tuple[int, ...]     # token ids
    answer: tuple[int, ...]       # token ids, no BOS/EOS
    scene: Optional[Scene] = None  # absent when loaded from disk


@dataclass(frozen=True)
class QATask:
    """One task: a single query type with fixed arguments.

    ``codebook_seed`` pins the shared scene rendering (one codebook per run,
    shared by every task so cross-task structure is real); ``seed`` drives
    example sampling for this task alone. ``domain`` names a task-specific
    orthogonal rotation of feature space (the analog of each dataset having
    its own visual domain); None means the base domain the backbone was
    pretrained on. Rotations are isometries, so decodability is unaffected.
    """

    task_id: str
    query: str                    # one of KEYWORDS
    args: tuple[str, ...]         # color/shape words, per query type
    train_size: int = 2000
    val_size: int = 500
    seed: int = 0
    codebook_seed: int = 0
    feature_dim: int = 16
    domain: Optional[str] = None

    def question_tokens(self) -> tuple[int, ...]:
        return tokens([self.query, *self.args])

    def answer_classes(self) -> list[tuple[int, ...]]:
        if self.query == "count":
            return [tokens([d]) for d in DIGITS[: COUNT_MAX + 1]]
        if self.query == "exist" or self.query == "compare":
            return [tokens(["yes"]), tokens(["no"])]
        if self.query == "parity":
            return [tokens(["even"]), tokens(["odd"])]
        if self.query == "maxcolor":
            return [tokens([c]) for c in COLORS]
        raise ValueError(f"unknown query type {self.query!r}")


@dataclass
class Dataset:
    examples: list[Example]

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]


class RevocableDataset:
    """Dataset handle the harness can revoke once its task completes."""

    def __init__(self, dataset: Dataset, label: str):
        self._dataset: Optional[Dataset] = dataset
        self.label = label

    @property
    def examples(self) -> list[Example]:
        if self._dataset is None:
            raise RevokedDataError(f"training data {self.label!r} was revoked")
        return self._dataset.examples

    def __len__(self) -> int:
        return len(self.examples)

    def revoke(self) -> None:
        self._dataset = None

    @property
    def revoked(self) -> bool:
        return self._dataset is None


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

class Codebook:
    """Seeded attribute vectors; one shared instance per run seed."""

    def __init__(self, seed: int, feature_dim: int = 16):
        rng = Rng(seed).split("scene-codebook")
        self.feature_dim = feature_dim
        self.color_vecs = rng.split("color").normal((len(COLORS), feature_dim))
        self.shape_vecs = rng.split("shape").normal((len(SHAPES), feature_dim))
        self.size_vecs = rng.split("size").normal((len(SIZES), feature_dim))
        combined = (self.color_vecs[:, None, None, :]
                    + self.shape_vecs[None, :, None, :]
                    + self.size_vecs[None, None, :, :]).reshape(-1, feature_dim)
        self._combined = combined
        diff = combined[:, None, :] - combined[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        self.min_distance = float(dist.min())
        self.noise_std = NOISE_FRACTION * self.min_distance / np.sqrt(feature_dim)
        self.noise_cap = 0.45 * self.min_distance
        self._seed = seed
        self._rotations: dict[Optional[str], np.ndarray] = {}

    def rotation(self, domain: Optional[str]) -> np.ndarray:
        """Orthogonal feature-space map for a named domain (identity for None)."""
        if domain not in self._rotations:
            if domain is None:
                self._rotations[None] = np.eye(self.feature_dim)
            else:
                g = Rng(self._seed).split(f"domain-{domain}").normal(
                    (self.feature_dim, self.feature_dim))
                q, r = np.linalg.qr(g)
                self._rotations[domain] = q * np.sign(np.diag(r))
        return self._rotations[domain]

    def render(self, scene: Scene, rng: Rng, domain: Optional[str] = None) -> np.ndarray:
        base = (self.color_vecs[list(scene.colors)]
                + self.shape_vecs[list(scene.shapes)]
                + self.size_vecs[list(scene.sizes)])
        noise = rng.normal(base.shape, self.noise_std)
        norms = np.sqrt((noise ** 2).sum(-1, keepdims=True))
        over = norms > self.noise_cap
        if over.any():
            noise = np.where(over, noise * (self.noise_cap / norms), noise)
        return (base + noise) @ self.rotation(domain)

    def decode_slot(self, vec: np.ndarray, domain: Optional[str] = None
                    ) -> tuple[int, int, int]:
        """Nearest combined-code lookup; exact under the noise cap."""
        vec = vec @ self.rotation(domain).T
        idx = int(np.argmin(((self._combined - vec) ** 2).sum(-1)))
        n_s, n_z = len(SHAPES), len(SIZES)
        return idx // (n_s * n_z), (idx // n_z) % n_s, idx % n_z

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.color_vecs, self.shape_vecs, self.size_vecs):
            h.update(arr.tobytes())
        return h.hexdigest()


_CODEBOOKS: dict[tuple[int, int], Codebook] = {}


def get_codebook(seed: int, feature_dim: int = 16) -> Codebook:
    key = (seed, feature_dim)
    if key not in _CODEBOOKS:
        _CODEBOOKS[key] = Codebook(seed, feature_dim)
    return _CODEBOOKS[key]


# ---------------------------------------------------------------------------
# the symbolic evaluator (ground-truth oracle)
# ---------------------------------------------------------------------------

def evaluate_query(query: str, args: tuple[str, ...], scene: Scene) -> tuple[int, ...]:
    """Brute-force answer computation over the discrete slots."""
    if query == "count":
        c = COLORS.index(args[0])
        n = sum(1 for x in scene.colors if x == c)
        if n > COUNT_MAX:
            raise ValueError("count exceeds the task's answer vocabulary")
        return tokens([DIGITS[n]])
    if query == "exist":
        s = SHAPES.index(args[0])
        return tokens(["yes" if s in scene.shapes else "no"])
    if query == "maxcolor":
        s = SHAPES.index(args[0])
        cands = [i for i, sh in enumerate(scene.shapes) if sh == s]
        if not cands:
            raise ValueError("maxcolor scene has no slot of the argument shape")
        best = max(cands, key=lambda i: scene.sizes[i])
        ties = [i for i in cands if scene.sizes[i] == scene.sizes[best]]
        if len(ties) > 1:
            raise ValueError("maxcolor scene has an ambiguous largest slot")
        return tokens([COLORS[scene.colors[best]]])
    if query == "parity":
        s = SHAPES.index(args[0])
        n = sum(1 for x in scene.shapes if x == s)
        return tokens(["even" if n % 2 == 0 else "odd"])
    if query == "compare":
        a, b = COLORS.index(args[0]), COLORS.index(args[1])
        na = sum(1 for x in scene.colors if x == a)
        nb = sum(1 for x in scene.colors if x == b)
        return tokens(["yes" if na > nb else "no"])
    raise ValueError(f"unknown query type {query!r}")


# ---------------------------------------------------------------------------
# scene construction per target answer class
# ---------------------------------------------------------------------------

def _uniform_slot(rng: Rng, exclude_colors=(), exclude_shapes=()):
    colors = [i for i in range(len(COLORS)) if i not in exclude_colors]
    shapes = [i for i in range(len(SHAPES)) if i not in exclude_shapes]
    c = colors[int(rng.integers(0, len(colors)))]
    s = shapes[int(rng.integers(0, len(shapes)))]
    z = int(rng.integers(0, len(SIZES)))
    return c, s, z


def _shuffled_scene(rng: Rng, slots: list[tuple[int, int, int]]) -> Scene:
    order = rng.permutation(len(slots))
    slots = [slots[i] for i in order]
    return Scene(tuple(s[0] for s in slots), tuple(s[1] for s in slots),
                 tuple(s[2] for s in slots))


def _construct_scene(task: QATask, cls: tuple[int, ...], rng: Rng) -> Scene:
    """Propose a scene intended to have answer `cls`; caller verifies."""
    q, args = task.query, task.args
    if q == "count":
        want = int(VOCAB[cls[0]])
        c = COLORS.index(args[0])
        m = int(rng.integers(max(want, MIN_SLOTS), MAX_SLOTS + 1))
        slots = [(c, *_uniform_slot(rng)[1:]) for _ in range(want)]
        slots += [_uniform_slot(rng, exclude_colors=(c,)) for _ in range(m - want)]
        return _shuffled_scene(rng, slots)
    if q == "exist":
        yes = VOCAB[cls[0]] == "yes"
        s = SHAPES.index(args[0])
        m = int(rng.integers(MIN_SLOTS, MAX_SLOTS + 1))
        if yes:
            k = int(rng.integers(1, m + 1))
            slots = [(_uniform_slot(rng)[0], s, int(rng.integers(0, len(SIZES))))
                     for _ in range(k)]
            slots += [_uniform_slot(rng, exclude_shapes=(s,)) for _ in range(m - k)]
        else:
            slots = [_uniform_slot(rng, exclude_shapes=(s,)) for _ in range(m)]
        return _shuffled_scene(rng, slots)
    if q == "maxcolor":
        color_word = VOCAB[cls[0]]
        c = COLORS.index(color_word)
        s = SHAPES.index(args[0])
        m = int(rng.integers(MIN_SLOTS, MAX_SLOTS + 1))
        k = int(rng.integers(1, min(3, m) + 1))
        top = int(rng.integers(1, len(SIZES)))  # the unique largest gets `top`
        slots = [(c, s, top)]
        slots += [(_uniform_slot(rng)[0], s, int(rng.integers(0, top)))
                  for _ in range(k - 1)]
        slots += [_uniform_slot(rng, exclude_shapes=(s,)) for _ in range(m - k)]
        return _shuffled_scene(rng, slots)
    if q == "parity":
        even = VOCAB[cls[0]] == "even"
        s = SHAPES.index(args[0])
        # small scenes and at most 3 argument-shape slots keep parity
        # learnable by a single bottleneck adapter
        m = int(rng.integers(MIN_SLOTS, 6))
        feasible = [k for k in range(0, min(m, 3) + 1) if (k % 2 == 0) == even]
        k = feasible[int(rng.integers(0, len(feasible)))]
        slots = [(_uniform_slot(rng)[0], s, int(rng.integers(0, len(SIZES))))
                 for _ in range(k)]
        slots += [_uniform_slot(rng, exclude_shapes=(s,)) for _ in range(m - k)]
        return _shuffled_scene(rng, slots)
    if q == "compare":
        yes = VOCAB[cls[0]] == "yes"
        a, b = COLORS.index(args[0]), COLORS.index(args[1])
        m = int(rng.integers(MIN_SLOTS, MAX_SLOTS + 1))
        pairs = [(na, nb) for na in range(m + 1) for nb in range(m + 1 - na)
                 if (na > nb) == yes]
        na, nb = pairs[int(rng.integers(0, len(pairs)))]
        slots = [(a, *_uniform_slot(rng)[1:]) for _ in range(na)]
        slots += [(b, *_uniform_slot(rng)[1:]) for _ in range(nb)]
        slots += [_uniform_slot(rng, exclude_colors=(a, b))
                  for _ in range(m - na - nb)]
        return _shuffled_scene(rng, slots)
    raise ValueError(f"unknown query type {q!r}")


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

MAX_REJECTS = 500


def _class_targets(n: int, classes: list, rng: Rng) -> list:
    """Near-uniform class list of length n (quotas differ by at most 1)."""
    base, extra = divmod(n, len(classes))
    quota = [base + (1 if i < extra else 0) for i in range(len(classes))]
    targets = [c for c, q in zip(classes, quota) for _ in range(q)]
    order = rng.permutation(len(targets))
    return [targets[i] for i in order]


def generate_task(task: QATask) -> tuple[Dataset, Dataset]:
    """Build (train, val) splits: answer-balanced, signature-disjoint,
    byte-identical per task description."""
    classes = task.answer_classes()
    if len(classes) > (task.train_size + task.val_size) // 2:
        raise ValueError("answer vocabulary too large to balance")
    book = get_codebook(task.codebook_seed, task.feature_dim)
    rng = Rng(task.seed).split(f"task-{task.task_id}")
    question = task.question_tokens()
    seen: set = set()

    def build(split: str, n: int) -> Dataset:
        srng = rng.split(split)
        scene_rng = srng.split("scenes")
        noise_rng = srng.split("noise")
        out = []
        for cls in _class_targets(n, classes, srng.split("order")):
            for attempt in range(MAX_REJECTS):
                scene = _construct_scene(task, cls, scene_rng)
                try:
                    ans = evaluate_query(task.query, task.args, scene)
                except ValueError:
                    continue
                sig = (scene.signature(), question)
                if ans == cls and sig not in seen:
                    seen.add(sig)
                    feats = book.render(scene, noise_rng, task.domain)
                    out.append(Example(feats, question, ans, scene))
                    break
            else:
                raise ValueError(
                    f"could not balance class {cls} for task {task.task_id}"
                    " (vocabulary too large for the scene space)")
        return Dataset(out)

    return build("train", task.train_size), build("val", task.val_size)


def score_exact_match(predictions: Sequence[Sequence[int]],
                      references: Sequence[Sequence[int]]) -> float:
    """100 * (exact token-sequence matches) / n."""
    if len(predictions) != len(references):
        raise ValueError("predictions and references differ in length")
    hits = sum(1 for p, r in zip(predictions, references)
               if tuple(p) == tuple(r))
    return 100.0 * hits / len(references)


# ---------------------------------------------------------------------------
# the standard five-task suite and its pretraining mixture
# ---------------------------------------------------------------------------

CL_TASK_SPECS = [
    ("count-red", "count", ("red",)),
    ("exist-circle", "exist", ("circle",)),
    ("maxcolor-triangle", "maxcolor", ("triangle",)),
    ("parity-star", "parity", ("star",)),
    ("compare-blue-green", "compare", ("blue", "green")),
]

# Pretraining uses the same query types with argument sets disjoint from
# every CL task's arguments (per query type).
PRETRAIN_TASK_SPECS = [
    ("pre-count-yellow", "count", ("yellow",)),
    ("pre-count-purple", "count", ("purple",)),
    ("pre-exist-square", "exist", ("square",)),
    ("pre-exist-hexagon", "exist", ("hexagon",)),
    ("pre-maxcolor-diamond", "maxcolor", ("diamond",)),
    ("pre-maxcolor-cross", "maxcolor", ("cross",)),
    ("pre-parity-heart", "parity", ("heart",)),
    ("pre-parity-hexagon", "parity", ("hexagon",)),
    ("pre-compare-pink-brown", "compare", ("pink", "brown")),
    ("pre-compare-orange-yellow", "compare", ("orange", "yellow")),
]


# Two of the five tasks share the pretraining feature domain (mirroring two
# datasets drawing on the same image source); the rest get their own domain.
BASE_DOMAIN_TASKS = frozenset({"count-red", "parity-star"})


def suite_tasks(seed: int, train_size: int = 2000, val_size: int = 500,
                feature_dim: int = 16) -> list[QATask]:
    """The five standard CL tasks: one shared codebook, per-task domains."""
    return [QATask(task_id=name, query=q, args=args, train_size=train_size,
                   val_size=val_size, seed=Rng(seed).split(name).seed,
                   codebook_seed=seed, feature_dim=feature_dim,
                   domain=None if name in BASE_DOMAIN_TASKS else name)
            for name, q, args in CL_TASK_SPECS]


def task_orders(seed: int, n_orders: int = 3) -> list[list[int]]:
    """Fixed seeded permutations of the five tasks."""
    rng = Rng(seed).split("task-orders")
    return [list(map(int, rng.split(f"order-{i}").permutation(len(CL_TASK_SPECS))))
            for i in range(n_orders)]


def pretrain_corpus(seed: int, size: int = 3000, val_size: int = 500,
                    feature_dim: int = 16) -> tuple[Dataset, Dataset]:
    """Mixture over all query types with held-out argument choices.

    Proportions across the mixture components are equal to within one
    example; the component argument sets never intersect any CL task's.
    """
    per, extra = divmod(size, len(PRETRAIN_TASK_SPECS))
    per_val, extra_val = divmod(val_size, len(PRETRAIN_TASK_SPECS))
    train_all: list[Example] = []
    val_all: list[Example] = []
    for i, (name, q, args) in enumerate(PRETRAIN_TASK_SPECS):
        t = QATask(task_id=name, query=q, args=args,
                   train_size=per + (1 if i < extra else 0),
                   val_size=per_val + (1 if i < extra_val else 0),
                   seed=Rng(seed).split(name).seed,
                   codebook_seed=seed, feature_dim=feature_dim)
        tr, va = generate_task(t)
        train_all.extend(tr.examples)
        val_all.extend(va.examples)
    mix = Rng(seed).split("pretrain-mix")
    train_all = [train_all[i] for i in mix.split("train").permutation(len(train_all))]
    val_all = [val_all[i] for i in mix.split("val").permutation(len(val_all))]
    return Dataset(train_all), Dataset(val_all)


def majority_answer_fraction(dataset: Dataset) -> float:
    """Frequency (in %) of the most common answer sequence."""
    counts: dict[tuple[int, ...], int] = {}
    for ex in dataset:
        counts[ex.answer] = counts.get(ex.answer, 0) + 1
    return 100.0 * max(counts.values()) / len(dataset)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def save_dataset(path: Path, dataset: Dataset) -> str:
    """Line-delimited records; returns the file's sha256 hex digest."""
    path = Path(path)
    lines = []
    for ex in dataset:
        lines.append(json.dumps({
            "scene_features": [list(row) for row in ex.features],
            "question_ids": list(ex.question),
            "answer_ids": list(ex.answer),
        }, separators=(",", ":")))
    blob = ("\n".join(lines) + "\n").encode("utf-8")
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_dataset(path: Path) -> Dataset:
    out = []
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        out.append(Example(np.array(rec["scene_features"], dtype=np.float64),
                           tuple(rec["question_ids"]),
                           tuple(rec["answer_ids"])))
    return Dataset(out)


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
