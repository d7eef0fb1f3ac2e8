"""Synthetic long-context recall and bAbI-style QA tasks.

Everything is word-level over a closed vocabulary. Filler tokens (``f0``,
``f1``, ...) dilute the supporting facts; they carry no information and the
rule-based :func:`solve` skips them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

RESERVED = ["<pad>", "<bos>", "<eos>", "?", "."] + [f"<r{i}>" for i in range(5, 16)]
PAD, BOS, EOS, QUERY, STOP = range(5)

KEYS = [f"k{i}" for i in range(64)]
VALUES = [f"v{i}" for i in range(64)]
FILLER = [f"f{i}" for i in range(256)]
NAMES = ["mary", "john", "sandra", "daniel", "bill", "fred", "julie", "emma"]
PLACES = ["kitchen", "garden", "office", "bathroom", "hallway", "bedroom", "cellar", "park"]
OBJECTS = ["apple", "football", "milk", "key", "book", "ball", "box", "pen"]
WORDS = ["went", "to", "took", "dropped", "where", "is", "in", "not", "how", "many",
         "objects", "carrying", "yes", "no"]
DIGITS = [str(i) for i in range(10)]

QA_KINDS = ("two_fact", "yes_no", "counting", "negation")
TASK_KINDS = ("recall",) + QA_KINDS


class UnknownTokenError(KeyError):
    def __init__(self, token: str):
        super().__init__(f"token not in vocabulary: {token!r}")
        self.token = token


class Vocab:
    """Bijective token <-> id table. Ids below 16 are reserved."""

    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        if list(tokens[:len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def default(cls) -> "Vocab":
        return cls(RESERVED + KEYS + VALUES + FILLER + NAMES + PLACES + OBJECTS + WORDS + DIGITS)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise UnknownTokenError(token) from None


def encode(text: str | Sequence[str], vocab: Vocab) -> list[int]:
    words = text.split() if isinstance(text, str) else list(text)
    return [vocab.id(w) for w in words]


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise IndexError(f"token id {i} outside vocabulary of size {len(vocab)}")
        out.append(vocab.tokens[i])
    return " ".join(out)


@dataclass(frozen=True)
class Sample:
    context: tuple[str, ...]
    question: tuple[str, ...]
    answer: tuple[str, ...]
    kind: str
    needle_positions: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.answer:
            raise ValueError("answer must be nonempty")
        if any(not 0 <= p < len(self.context) for p in self.needle_positions):
            raise ValueError("needle positions must index into the context")

    @property
    def context_len(self) -> int:
        return len(self.context)

    @property
    def prompt(self) -> tuple[str, ...]:
        return self.context + self.question

    def tokens(self) -> tuple[str, ...]:
        return self.context + self.question + self.answer

    def to_record(self) -> dict:
        return {"context": " ".join(self.context), "question": " ".join(self.question),
                "answer": " ".join(self.answer), "kind": self.kind,
                "needle_positions": list(self.needle_positions)}

    @classmethod
    def from_record(cls, rec: dict) -> "Sample":
        return cls(tuple(rec["context"].split()), tuple(rec["question"].split()),
                   tuple(rec["answer"].split()), rec["kind"], tuple(rec["needle_positions"]))


def write_samples(path, samples: Iterable[Sample]) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")


def read_samples(path) -> list[Sample]:
    with open(path) as fh:
        return [Sample.from_record(json.loads(line)) for line in fh if line.strip()]


# generators ---------------------------------------------------------------

def _interleave(rng: np.random.Generator, units: list[list[str]], filler_len: int,
                filler: Sequence[str] = FILLER) -> tuple[list[str], list[int]]:
    """Scatter ``filler_len`` filler tokens between ordered units.

    Returns the flat token list and the start index of each unit.
    """
    fill = [filler[i] for i in rng.integers(0, len(filler), size=filler_len)]
    cuts = np.sort(rng.integers(0, filler_len + 1, size=len(units)))
    out, starts, prev = [], [], 0
    for unit, cut in zip(units, cuts):
        out.extend(fill[prev:cut])
        starts.append(len(out))
        out.extend(unit)
        prev = cut
    out.extend(fill[prev:])
    return out, starts


def gen_recall(rng: np.random.Generator, n_pairs: int, filler_len: int,
               query_key: str | None = None, keys: Sequence[str] = KEYS,
               values: Sequence[str] = VALUES) -> Sample:
    """Key/value pairs buried in filler; the question names one key.

    Context length is exactly ``2 * n_pairs + filler_len``.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if n_pairs > len(keys) or n_pairs > len(values):
        raise ValueError(f"cannot draw {n_pairs} distinct keys from {len(keys)} keys "
                         f"and {len(values)} values")
    ks = [keys[i] for i in rng.choice(len(keys), size=n_pairs, replace=False)]
    vs = [values[i] for i in rng.choice(len(values), size=n_pairs, replace=False)]
    if query_key is None:
        q = int(rng.integers(n_pairs))
    else:
        if query_key not in keys:
            raise ValueError(f"unknown key {query_key!r}")
        if query_key in ks:
            q = ks.index(query_key)
        else:
            q = int(rng.integers(n_pairs))
            ks[q] = query_key
    context, starts = _interleave(rng, [[k, v] for k, v in zip(ks, vs)], filler_len)
    needle = (starts[q], starts[q] + 1)
    return Sample(tuple(context), ("?", ks[q]), (vs[q],), "recall", needle)


def _sentence(*words: str) -> list[str]:
    return list(words) + ["."]


def _choice(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _gen_two_fact(rng):
    actors = list(rng.choice(NAMES, size=3, replace=False))
    objects = list(rng.choice(OBJECTS, size=2, replace=False))
    events = [("went", a, _choice(rng, PLACES)) for a in actors for _ in range(int(rng.integers(1, 3)))]
    holders = {o: _choice(rng, actors) for o in objects}
    events += [("took", holders[o], o) for o in objects]
    order = rng.permutation(len(events))
    events = [events[i] for i in order]
    target = _choice(rng, objects)
    holder = holders[target]
    location = [e[2] for e in events if e[0] == "went" and e[1] == holder][-1]
    sentences = [_sentence(a, "went", "to", x) if verb == "went" else _sentence(a, "took", x)
                 for verb, a, x in events]
    took = next(i for i, e in enumerate(events) if e[0] == "took" and e[2] == target)
    moved = [i for i, e in enumerate(events) if e[0] == "went" and e[1] == holder][-1]
    support = sorted({took, moved})
    return sentences, support, ("where", "is", target, "?"), (location,)


def _gen_yes_no(rng):
    actors = list(rng.choice(NAMES, size=3, replace=False))
    events = [(a, _choice(rng, PLACES)) for a in actors for _ in range(int(rng.integers(1, 3)))]
    events = [events[i] for i in rng.permutation(len(events))]
    actor = _choice(rng, actors)
    last = [i for i, (a, _) in enumerate(events) if a == actor][-1]
    where = events[last][1]
    if rng.random() < 0.5:
        place, answer = where, "yes"
    else:
        place, answer = _choice(rng, [p for p in PLACES if p != where]), "no"
    sentences = [_sentence(a, "went", "to", p) for a, p in events]
    return sentences, [last], ("is", actor, "in", place, "?"), (answer,)


def _gen_counting(rng):
    actors = list(rng.choice(NAMES, size=2, replace=False))
    owner = {}
    events = []
    for _ in range(int(rng.integers(2, 9))):
        a = _choice(rng, actors)
        held = [o for o, h in owner.items() if h == a]
        free = [o for o in OBJECTS if o not in owner]
        if held and (not free or rng.random() < 0.3):
            o = _choice(rng, held)
            del owner[o]
            events.append((a, "dropped", o))
        else:
            o = _choice(rng, free)
            owner[o] = a
            events.append((a, "took", o))
    actor = _choice(rng, actors)
    count = sum(1 for h in owner.values() if h == actor)
    sentences = [_sentence(a, verb, o) for a, verb, o in events]
    support = [i for i, (a, _, _) in enumerate(events) if a == actor] or [0]
    return sentences, support, ("how", "many", "objects", "is", actor, "carrying", "?"), (str(count),)


def _gen_negation(rng, negate: bool | None = None):
    actors = list(rng.choice(NAMES, size=3, replace=False))
    facts = [(a, _choice(rng, PLACES), True) for a in actors]
    facts += [(_choice(rng, actors), _choice(rng, PLACES), bool(rng.random() < 0.5))
              for _ in range(int(rng.integers(0, 3)))]
    actor = _choice(rng, actors)
    place = _choice(rng, PLACES)
    facts = [f for f in facts if f[0] != actor]
    facts = [facts[i] for i in rng.permutation(len(facts))]
    # the queried actor is first placed, then (maybe) negated, without other facts about them between
    first = int(rng.integers(len(facts) + 1))
    facts.insert(first, (actor, place, True))
    negate = bool(rng.random() < 0.5) if negate is None else negate
    support = [first]
    if negate:
        second = int(rng.integers(first + 1, len(facts) + 1))
        facts.insert(second, (actor, place, False))
        support.append(second)
    sentences = [_sentence(a, "is", "in", p) if pos else _sentence(a, "is", "not", "in", p)
                 for a, p, pos in facts]
    answer = "no" if negate else "yes"
    return sentences, support, ("is", actor, "in", place, "?"), (answer,)


_QA = {"two_fact": _gen_two_fact, "yes_no": _gen_yes_no, "counting": _gen_counting,
       "negation": _gen_negation}


def _assemble(rng, kind, parts, filler_len) -> Sample:
    sentences, support, question, answer = parts
    context, starts = _interleave(rng, sentences, filler_len)
    return Sample(tuple(context), tuple(question), tuple(answer), kind,
                  tuple(starts[i] for i in support))


def gen_qa(rng: np.random.Generator, kind: str, filler_len: int = 0) -> Sample:
    """Templated micro-story with filler; ``kind`` in ``QA_KINDS``."""
    if kind not in _QA:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {QA_KINDS}")
    return _assemble(rng, kind, _QA[kind](rng), filler_len)


def negation_pair(rng: np.random.Generator, filler_len: int = 0) -> tuple[Sample, Sample]:
    """(negated, control): identical stories except the negating sentence."""
    state = rng.bit_generator.state
    negated = _assemble(rng, "negation", _gen_negation(rng, negate=True), filler_len)
    rng.bit_generator.state = state
    control = _assemble(rng, "negation", _gen_negation(rng, negate=False), filler_len)
    return negated, control


def generate_samples(rng: np.random.Generator, kind: str, n: int, filler_len: int = 0,
                     n_pairs: int = 4) -> list[Sample]:
    if kind == "recall":
        return [gen_recall(rng, n_pairs, filler_len) for _ in range(n)]
    return [gen_qa(rng, kind, filler_len) for _ in range(n)]


# rule-based oracle ----------------------------------------------------------

def _sentences(context: Sequence[str]) -> list[list[str]]:
    words = [w for w in context if w not in _FILLER_SET]
    out, cur = [], []
    for w in words:
        if w == ".":
            out.append(cur)
            cur = []
        else:
            cur.append(w)
    return out


_FILLER_SET = frozenset(FILLER)


def solve(sample: Sample) -> tuple[str, ...]:
    """Answer a sample by parsing its text. Knows nothing about the generators."""
    ctx, q = list(sample.context), list(sample.question)
    if q and q[0] == "?":
        key = q[1]
        words = [w for w in ctx if w not in _FILLER_SET]
        for i, w in enumerate(words[:-1]):
            if w == key:
                return (words[i + 1],)
        raise ValueError(f"key {key!r} not found in context")

    location: dict[str, str] = {}
    negated: dict[str, str] = {}
    holding: dict[str, str] = {}
    for s in _sentences(ctx):
        if len(s) == 4 and s[1:3] == ["went", "to"]:
            location[s[0]] = s[3]
            negated.pop(s[0], None)
        elif len(s) == 4 and s[1:3] == ["is", "in"]:
            location[s[0]] = s[3]
            negated.pop(s[0], None)
        elif len(s) == 5 and s[1:4] == ["is", "not", "in"]:
            negated[s[0]] = s[4]
            if location.get(s[0]) == s[4]:
                del location[s[0]]
        elif len(s) == 3 and s[1] == "took":
            holding[s[2]] = s[0]
        elif len(s) == 3 and s[1] == "dropped":
            holding.pop(s[2], None)
        else:
            raise ValueError(f"unparseable sentence: {' '.join(s)!r}")

    if q[:2] == ["where", "is"]:
        return (location[holding[q[2]]],)
    if q[:3] == ["how", "many", "objects"]:
        actor = q[4]
        return (str(sum(1 for h in holding.values() if h == actor)),)
    if q[0] == "is" and q[2] == "in":
        actor, place = q[1], q[3]
        if negated.get(actor) == place:
            return ("no",)
        if actor not in location:
            raise ValueError(f"no information about {actor!r}")
        return ("yes",) if location[actor] == place else ("no",)
    raise ValueError(f"unparseable question: {' '.join(q)!r}")
