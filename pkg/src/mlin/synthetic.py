"""Desk-scale synthetic question answering over object "regions" and question "words".

Scenes hold 3-8 coloured shapes at jittered quadrant positions.  Regions are
a fixed bank of ``REGION_SLOTS`` rows (objects plus background filler), the
way detector pipelines emit a fixed number of proposals per image.  Questions
are short token sequences padded with a filler word; tokens enter the model
one-hot, so the word projection acts as an embedding table.

Every answer comes from :func:`resolve`, a rule-based resolver that reads the
scene only.  Within each template the answer is drawn uniformly before the
scene is built, so no question is answerable from its wording alone beyond
the per-template chance rate.
"""

from __future__ import annotations

import hashlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("cube", "sphere", "cylinder")
QUADRANTS = ("top-left", "top-right", "bottom-left", "bottom-right")
TEMPLATES = ("count", "exists", "color-of", "shape-at")
FILLER = "the"

VOCAB = ("how-many", "is-there", "what-color", "what-shape") + COLORS + SHAPES + QUADRANTS + (FILLER,)
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}
TEMPLATE_TOKEN = dict(zip(TEMPLATES, VOCAB[:4]))

COUNT_ANSWERS = ("0", "1", "2", "3")
ANSWERS = COLORS + SHAPES + COUNT_ANSWERS + ("yes", "no")
ANSWER_ID = {a: i for i, a in enumerate(ANSWERS)}
NUM_CLASSES = len(ANSWERS)

D_IN = 16
REGION_SLOTS = 8
MIN_OBJECTS, MAX_OBJECTS = 3, 8
MIN_WORDS, MAX_WORDS = 4, 8
NOISE_SIGMA = 0.05
POS_JITTER = 0.05

# region feature layout
_SHAPE_OFF, _COLOR_OFF, _POS_OFF, _OBJ_OFF, _CELL_OFF = 0, 3, 7, 9, 10


class MalformedQuestion(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    x: float
    y: float

    @property
    def quadrant(self) -> str:
        return quadrant_of(self.x, self.y)


def quadrant_of(x: float, y: float) -> str:
    # image convention: y grows downward
    return ("top-" if y < 0.5 else "bottom-") + ("left" if x < 0.5 else "right")


@dataclass
class SynthScene:
    objects: list

    @property
    def M(self) -> int:
        return len(self.objects)


@dataclass
class SynthQuestion:
    template: str
    args: tuple
    tokens: tuple = ()

    @property
    def N(self) -> int:
        return len(self.tokens)


def resolve(scene: SynthScene, question: SynthQuestion) -> str:
    """Ground-truth answer computed from the scene."""
    t, args = question.template, question.args
    objs = scene.objects
    if t == "count":
        _expect(args, (COLORS,), t)
        n = sum(o.color == args[0] for o in objs)
        if n >= len(COUNT_ANSWERS):
            raise MalformedQuestion(f"count {n} exceeds the answer vocabulary")
        return str(n)
    if t == "exists":
        _expect(args, (SHAPES, COLORS), t)
        return "yes" if any(o.shape == args[0] and o.color == args[1] for o in objs) else "no"
    if t == "color-of":
        _expect(args, (SHAPES,), t)
        hits = [o for o in objs if o.shape == args[0]]
        if len(hits) != 1:
            raise MalformedQuestion(f"color-of({args[0]}) needs exactly one {args[0]}, scene has {len(hits)}")
        return hits[0].color
    if t == "shape-at":
        _expect(args, (QUADRANTS,), t)
        hits = [o for o in objs if o.quadrant == args[0]]
        if len(hits) != 1:
            raise MalformedQuestion(f"shape-at({args[0]}) needs exactly one object there, scene has {len(hits)}")
        return hits[0].shape
    raise MalformedQuestion(f"unknown template {t!r}")


def _expect(args: tuple, domains: tuple, template: str) -> None:
    if len(args) != len(domains) or any(a not in dom for a, dom in zip(args, domains)):
        raise MalformedQuestion(f"bad arguments {args!r} for template {template!r}")


# ---------------------------------------------------------------------------
# featurisation


def region_features(scene: SynthScene, rng: np.random.Generator) -> np.ndarray:
    """(REGION_SLOTS, D_IN) rows in random slot order, background rows for empty slots."""
    feats = np.zeros((REGION_SLOTS, D_IN))
    for row, obj in enumerate(scene.objects):
        feats[row, _SHAPE_OFF + SHAPES.index(obj.shape)] = 1.0
        feats[row, _COLOR_OFF + COLORS.index(obj.color)] = 1.0
        # centred to [-1, 1] so background rows sit at the origin
        feats[row, _POS_OFF] = 2.0 * obj.x - 1.0
        feats[row, _POS_OFF + 1] = 2.0 * obj.y - 1.0
        feats[row, _OBJ_OFF] = 1.0
        feats[row, _CELL_OFF + QUADRANTS.index(obj.quadrant)] = 1.0
    feats += rng.normal(0.0, NOISE_SIGMA, size=feats.shape)
    feats = feats[rng.permutation(REGION_SLOTS)]
    # keep values exactly representable in the 32-bit feature file
    return feats.astype(np.float32).astype(np.float64)


def word_features(question: SynthQuestion) -> np.ndarray:
    out = np.zeros((question.N, D_IN))
    out[np.arange(question.N), [TOKEN_ID[t] for t in question.tokens]] = 1.0
    return out


# ---------------------------------------------------------------------------
# generation


def _position(rng: np.random.Generator, quadrant: str) -> tuple[float, float]:
    cx = 0.25 if quadrant.endswith("left") else 0.75
    cy = 0.25 if quadrant.startswith("top") else 0.75
    return float(cx + rng.uniform(-POS_JITTER, POS_JITTER)), float(cy + rng.uniform(-POS_JITTER, POS_JITTER))


def _obj(rng, shape=None, color=None, quadrant=None, shapes=SHAPES, colors=COLORS, quadrants=QUADRANTS) -> SceneObject:
    shape = shape or shapes[rng.integers(len(shapes))]
    color = color or colors[rng.integers(len(colors))]
    quadrant = quadrant or quadrants[rng.integers(len(quadrants))]
    return SceneObject(shape, color, *_position(rng, quadrant))


def _others(seq: Sequence[str], *exclude: str) -> tuple:
    return tuple(s for s in seq if s not in exclude)


def _tokens(rng: np.random.Generator, content: list) -> tuple:
    n = int(rng.integers(max(MIN_WORDS, len(content)), MAX_WORDS + 1))
    toks = [FILLER] * n
    slots = np.sort(rng.choice(n, size=len(content), replace=False))
    for s, tok in zip(slots, content):
        toks[s] = tok
    return tuple(toks)


def _sample(rng: np.random.Generator) -> tuple[SynthScene, SynthQuestion, str]:
    template = TEMPLATES[rng.integers(len(TEMPLATES))]
    m = int(rng.integers(MIN_OBJECTS, MAX_OBJECTS + 1))
    if template == "count":
        color = COLORS[rng.integers(len(COLORS))]
        answer = COUNT_ANSWERS[rng.integers(len(COUNT_ANSWERS))]
        n = int(answer)
        objs = [_obj(rng, color=color) for _ in range(n)]
        objs += [_obj(rng, colors=_others(COLORS, color)) for _ in range(m - n)]
        args = (color,)
    elif template == "exists":
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = COLORS[rng.integers(len(COLORS))]
        answer = ("yes", "no")[rng.integers(2)]
        objs = []
        while len(objs) < m:
            o = _obj(rng)
            if o.shape == shape and o.color == color:
                continue
            objs.append(o)
        if answer == "yes":
            objs[0] = _obj(rng, shape=shape, color=color)
        args = (shape, color)
    elif template == "color-of":
        shape = SHAPES[rng.integers(len(SHAPES))]
        answer = COLORS[rng.integers(len(COLORS))]
        objs = [_obj(rng, shape=shape, color=answer)]
        objs += [_obj(rng, shapes=_others(SHAPES, shape)) for _ in range(m - 1)]
        args = (shape,)
    else:
        quadrant = QUADRANTS[rng.integers(len(QUADRANTS))]
        answer = SHAPES[rng.integers(len(SHAPES))]
        objs = [_obj(rng, shape=answer, quadrant=quadrant)]
        objs += [_obj(rng, quadrants=_others(QUADRANTS, quadrant)) for _ in range(m - 1)]
        args = (quadrant,)
    order = rng.permutation(len(objs))
    scene = SynthScene([objs[i] for i in order])
    content = [TEMPLATE_TOKEN[template], *args]
    question = SynthQuestion(template, args, _tokens(rng, content))
    return scene, question, answer


@dataclass
class Dataset:
    """Samples of (regions (M, d_in), words (N, d_in), label)."""

    R: list = field(default_factory=list)
    E: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    scenes: list = field(default_factory=list)
    questions: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def append(self, R: np.ndarray, E: np.ndarray, label: int, scene=None, question=None) -> None:
        if R.shape[1] != E.shape[1]:
            raise ValueError(f"region width {R.shape[1]} differs from word width {E.shape[1]}")
        self.R.append(R)
        self.E.append(E)
        self.labels.append(int(label))
        if scene is not None:
            self.scenes.append(scene)
            self.questions.append(question)

    @property
    def d_in(self) -> int:
        return self.R[0].shape[1]

    def sample_hash(self, i: int) -> str:
        h = hashlib.sha256()
        h.update(self.R[i].astype("<f4").tobytes())
        h.update(self.E[i].astype("<f4").tobytes())
        return h.hexdigest()

    def subset(self, idx: Sequence[int]) -> "Dataset":
        out = Dataset()
        for i in idx:
            out.append(self.R[i], self.E[i], self.labels[i],
                       self.scenes[i] if self.scenes else None,
                       self.questions[i] if self.questions else None)
        return out

    def class_distribution(self) -> dict:
        counts = Counter(self.labels)
        return {ANSWERS[c] if c < len(ANSWERS) else str(c): counts[c] for c in sorted(counts)}

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[tuple]:
        """Stacked batches of equal (M, N); shuffled when ``rng`` is given."""
        groups = defaultdict(list)
        for i in range(len(self)):
            groups[(self.R[i].shape[0], self.E[i].shape[0])].append(i)
        chunks = []
        for key in sorted(groups):
            idx = np.array(groups[key])
            if rng is not None:
                idx = idx[rng.permutation(len(idx))]
            chunks += [idx[s:s + batch_size] for s in range(0, len(idx), batch_size)]
        if rng is not None:
            chunks = [chunks[i] for i in rng.permutation(len(chunks))]
        for idx in chunks:
            yield (
                np.stack([self.R[i] for i in idx]),
                np.stack([self.E[i] for i in idx]),
                np.array([self.labels[i] for i in idx]),
            )


def generate(seed: int, count: int) -> Dataset:
    """``count`` samples, deterministic in ``seed``."""
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    ds = Dataset()
    for _ in range(count):
        scene, question, answer = _sample(rng)
        if resolve(scene, question) != answer:
            raise AssertionError(f"generator and resolver disagree on {question}")
        ds.append(region_features(scene, rng), word_features(question), ANSWER_ID[answer], scene, question)
    return ds


def make_splits(seed: int, n_train: int, n_test: int) -> tuple[Dataset, Dataset]:
    """Train and test sets with no (scene, question) hash shared between them."""
    train = generate(seed, n_train)
    seen = {train.sample_hash(i) for i in range(len(train))}
    test = Dataset()
    salt = 1
    while len(test) < n_test:
        extra = generate(seed * 1_000_003 + salt, n_test - len(test))
        keep = [i for i in range(len(extra)) if extra.sample_hash(i) not in seen]
        for i in keep:
            seen.add(extra.sample_hash(i))
        sub = extra.subset(keep)
        for j in range(len(sub)):
            test.append(sub.R[j], sub.E[j], sub.labels[j], sub.scenes[j], sub.questions[j])
        salt += 1
    return train, test


def question_signature(question_tokens: np.ndarray) -> tuple:
    """Order-free content of a one-hot question (filler dropped)."""
    ids = np.argmax(question_tokens, axis=1)
    return tuple(sorted(int(i) for i in ids if i != TOKEN_ID[FILLER]))


def question_only_baseline(train: Dataset, test: Dataset) -> float:
    """Test accuracy of the majority answer per question wording, learned on train."""
    table = defaultdict(Counter)
    for E, y in zip(train.E, train.labels):
        table[question_signature(E)][y] += 1
    overall = Counter(train.labels).most_common(1)[0][0]
    hits = 0
    for E, y in zip(test.E, test.labels):
        counts = table.get(question_signature(E))
        guess = counts.most_common(1)[0][0] if counts else overall
        hits += guess == y
    return hits / len(test)


def random_feature_dataset(seed: int, count: int, num_classes: int, d_in: int = D_IN, M: int = 6, N: int = 5) -> Dataset:
    """Gaussian features with labels cycling through classes: a balanced, unlearnable set."""
    rng = np.random.default_rng(seed)
    ds = Dataset()
    for i in range(count):
        R = rng.normal(size=(M, d_in)).astype(np.float32).astype(np.float64)
        E = rng.normal(size=(N, d_in)).astype(np.float32).astype(np.float64)
        ds.append(R, E, i % num_classes)
    return ds
