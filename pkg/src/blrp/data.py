"""Synthetic ListOps-style classification data.

Token layout (17 ids)::

    0        pad
    1..10    digits 0..9
    11..14   MAX MIN MED SUMMOD
    15, 16   "[" and "]"

An expression such as ``[MAX 2 9 [MIN 4 7] 0]`` tokenises to one id per
bracket, operator and digit. ``MED`` is ``int(median)`` (the mean of the two
middle values rounded down for even counts) and ``SUMMOD`` is the sum modulo 10.
"""
from collections import Counter
from dataclasses import dataclass
import json
import os
import statistics

import numpy as np

from .errors import LengthError, ParseError, SpecError

PAD = 0
DIGIT0 = 1
OPERATORS = ("MAX", "MIN", "MED", "SUMMOD")
OP_IDS = {name: 11 + i for i, name in enumerate(OPERATORS)}
OPEN = 15
CLOSE = 16
VOCAB_SIZE = 17
NUM_CLASSES = 10

_WORDS = {**{str(i): DIGIT0 + i for i in range(10)}, **OP_IDS, "[": OPEN, "]": CLOSE}
_NAMES = {v: k for k, v in _WORDS.items()}
_NAMES[PAD] = "<pad>"

MAX_AUGMENTED_LENGTH = 16384


@dataclass(frozen=True)
class TaskSample:
    tokens: tuple
    label: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "label", int(self.label))


@dataclass
class ListOpsSpec:
    max_depth: int = 3
    max_args: int = 6
    max_length: int = 256
    min_args: int = 2
    # chance that an argument below max_depth is itself an expression
    branch_prob: float = 0.4
    seed: int = 7

    def validate(self):
        if self.max_depth < 1:
            raise SpecError("max_depth must be >= 1")
        if not 1 <= self.min_args <= self.max_args:
            raise SpecError(f"need 1 <= min_args <= max_args, got {self.min_args}, {self.max_args}")
        # shortest depth-1 expression: [ OP d ... d ]
        if self.max_length < self.min_args + 3:
            raise SpecError(
                f"max_length={self.max_length} cannot fit a depth-1 expression "
                f"({self.min_args + 3} tokens)")
        if not 0.0 <= self.branch_prob <= 1.0:
            raise SpecError("branch_prob must lie in [0, 1]")


def tokenize(text):
    """Split an expression string into token ids."""
    words = text.replace("[", " [ ").replace("]", " ] ").split()
    try:
        return [_WORDS[w] for w in words]
    except KeyError as e:
        raise ParseError(f"unknown token {e.args[0]!r}") from None


def detokenize(tokens):
    out = []
    for t in tokens:
        w = _NAMES[int(t)]
        if out and out[-1] == "[":
            out[-1] = "[" + w
        else:
            out.append(w)
    return " ".join(out).replace(" ]", "]")


def apply_op(op, args):
    if op == "MAX":
        return max(args)
    if op == "MIN":
        return min(args)
    if op == "MED":
        return int(statistics.median(args))
    if op == "SUMMOD":
        return sum(args) % 10
    raise ParseError(f"unknown operator {op!r}")


def evaluate_tokens(tokens):
    """Recursive-descent evaluation of a token-id sequence."""
    tokens = list(tokens)
    pos = 0

    def expr():
        nonlocal pos
        if pos >= len(tokens):
            raise ParseError("unexpected end of expression")
        tok = tokens[pos]
        pos += 1
        if DIGIT0 <= tok < DIGIT0 + 10:
            return tok - DIGIT0
        if tok != OPEN:
            raise ParseError(f"unexpected token {_NAMES.get(tok, tok)!r} at {pos - 1}")
        if pos >= len(tokens) or tokens[pos] not in _OP_BY_ID:
            raise ParseError(f"expected operator at {pos}")
        op = _OP_BY_ID[tokens[pos]]
        pos += 1
        args = []
        while pos < len(tokens) and tokens[pos] != CLOSE:
            args.append(expr())
        if pos >= len(tokens):
            raise ParseError("missing ']'")
        pos += 1
        if not args:
            raise ParseError(f"{op} without arguments")
        return apply_op(op, args)

    value = expr()
    if pos != len(tokens):
        raise ParseError(f"trailing tokens after position {pos}")
    return value


_OP_BY_ID = {v: k for k, v in OP_IDS.items()}


def _gen_tree(rng, spec, depth):
    """Returns (tokens, value) for a random expression rooted at ``depth``."""
    op = OPERATORS[rng.integers(len(OPERATORS))]
    n_args = int(rng.integers(spec.min_args, spec.max_args + 1))
    toks = [OPEN, OP_IDS[op]]
    values = []
    for _ in range(n_args):
        if depth < spec.max_depth and rng.random() < spec.branch_prob:
            sub, v = _gen_tree(rng, spec, depth + 1)
            toks.extend(sub)
        else:
            v = int(rng.integers(10))
            toks.append(DIGIT0 + v)
        values.append(v)
    toks.append(CLOSE)
    return toks, apply_op(op, values)


def gen_listops(spec, n):
    """``n`` random expressions, each with its value as the label."""
    spec.validate()
    if n < 1:
        raise SpecError("n must be >= 1")
    rng = np.random.default_rng(spec.seed)
    out = []
    while len(out) < n:
        toks, value = _gen_tree(rng, spec, 1)
        if len(toks) <= spec.max_length:
            out.append(TaskSample(toks, value))
    return out


def label_distribution(samples, classes=NUM_CLASSES):
    counts = Counter(s.label for s in samples)
    return [counts.get(c, 0) for c in range(classes)]


def majority_fraction(samples, classes=NUM_CLASSES):
    counts = label_distribution(samples, classes)
    return max(counts) / max(1, len(samples))


def augment_max_concat(sample, k, max_length=MAX_AUGMENTED_LENGTH):
    """Wrap ``k`` copies of the expression in a single MAX node; the label is unchanged."""
    if k < 1:
        raise LengthError(f"factor must be >= 1, got {k}")
    toks = [OPEN, OP_IDS["MAX"]] + list(sample.tokens) * k + [CLOSE]
    if len(toks) > max_length:
        raise LengthError(f"augmented length {len(toks)} exceeds cap {max_length}")
    return TaskSample(toks, sample.label)


def write_jsonl(samples, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            f.write(json.dumps({"tokens": list(s.tokens), "label": s.label},
                               separators=(",", ":")))
            f.write("\n")
    os.replace(tmp, path)


def read_jsonl(path, classes=NUM_CLASSES, vocab_size=VOCAB_SIZE):
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                tokens, label = rec["tokens"], rec["label"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ParseError(f"{path}:{lineno}: malformed record ({e})") from None
            if not isinstance(label, int) or not 0 <= label < classes:
                raise ParseError(f"{path}:{lineno}: label {label!r} outside [0, {classes})")
            if (not isinstance(tokens, list) or not tokens
                    or not all(isinstance(t, int) and 0 <= t < vocab_size for t in tokens)):
                raise ParseError(f"{path}:{lineno}: tokens must be a non-empty list of ids < {vocab_size}")
            out.append(TaskSample(tokens, label))
    return out
