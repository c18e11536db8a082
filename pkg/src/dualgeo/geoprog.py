"""Geometry program DSL: vocabulary, step segmentation, execution, answer matching.

A program is a flat token sequence such as ``Minus C_3 N_0 [SEP] Half V_0 [EOS]``.
Each step is one operator followed by exactly ``arity`` arguments and binds the
next intermediate variable ``V_k``.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import (
    DanglingReference,
    DomainError,
    MalformedStep,
    MissingNumber,
    NoMatch,
    UnknownToken,
)

PAD, BOS, EOS, SEP = "[PAD]", "[BOS]", "[EOS]", "[SEP]"
CONTROL_TOKENS = (PAD, BOS, EOS, SEP)
STEP_DELIMITER = ";"

_NUMBER_RE = re.compile(r"^N_(\d+)$")
_VARIABLE_RE = re.compile(r"^V_(\d+)$")


# ---------------------------------------------------------------------------
# operator table

def _tan_guard(a):
    return abs(math.cos(math.radians(a))) > 1e-12


@dataclass(frozen=True)
class OperatorDef:
    name: str
    arity: int
    evaluator: Callable[..., float] = field(compare=False, repr=False)
    domain_guard: Callable[..., bool] = field(default=lambda *a: True, compare=False, repr=False)

    def __call__(self, *args: float) -> float:
        if len(args) != self.arity:
            raise MalformedStep(f"{self.name} expects {self.arity} arguments, got {len(args)}")
        if not self.domain_guard(*args):
            raise DomainError(f"{self.name}{tuple(args)} is outside the operator domain")
        try:
            out = self.evaluator(*args)
        except (OverflowError, ValueError, ZeroDivisionError) as exc:
            raise DomainError(f"{self.name}{tuple(args)}: {exc}") from exc
        if not math.isfinite(out):
            raise DomainError(f"{self.name}{tuple(args)} produced a non-finite value")
        return out


# name -> (arity, evaluator, guard); vocabulary files refer to operators by name
OPERATOR_REGISTRY: dict[str, tuple[int, Callable[..., float], Callable[..., bool]]] = {
    "Minus": (2, lambda a, b: a - b, lambda a, b: True),
    "Half": (1, lambda a: a / 2, lambda a: True),
    "Add": (2, lambda a, b: a + b, lambda a, b: True),
    "Mul": (2, lambda a, b: a * b, lambda a, b: True),
    "Div": (2, lambda a, b: a / b, lambda a, b: b != 0),
    "Double": (1, lambda a: 2 * a, lambda a: True),
    "Square": (1, lambda a: a * a, lambda a: True),
    "Sqrt": (1, math.sqrt, lambda a: a >= 0),
    "SinDeg": (1, lambda a: math.sin(math.radians(a)), lambda a: True),
    "CosDeg": (1, lambda a: math.cos(math.radians(a)), lambda a: True),
    "TanDeg": (1, lambda a: math.tan(math.radians(a)), _tan_guard),
    "PythHyp": (2, lambda a, b: math.sqrt(a * a + b * b), lambda a, b: True),
    "PythLeg": (2, lambda c, a: math.sqrt(c * c - a * a), lambda c, a: c * c - a * a >= 0),
}

DEFAULT_OPERATORS = tuple(OPERATOR_REGISTRY)
DEFAULT_CONSTANTS = (
    ("C_0", 30.0),
    ("C_1", 60.0),
    ("C_2", 90.0),
    ("C_3", 180.0),
    ("C_4", 360.0),
    ("C_5", math.pi),
)


def make_operator(name: str, arity: int | None = None) -> OperatorDef:
    if name not in OPERATOR_REGISTRY:
        raise UnknownToken(f"no evaluator registered for operator {name!r}")
    reg_arity, fn, guard = OPERATOR_REGISTRY[name]
    if arity is not None and arity != reg_arity:
        raise ValueError(f"operator {name} has arity {reg_arity}, file says {arity}")
    return OperatorDef(name, reg_arity, fn, guard)


# ---------------------------------------------------------------------------
# vocabulary

class ProgramVocabulary:
    """Token alphabet: control tokens, operators, constants, N_i and V_j slots.

    Ids are assigned in that order, so a vocabulary rebuilt from its own
    ``to_dict()`` yields identical ids.
    """

    def __init__(
        self,
        operators: Sequence[OperatorDef] | None = None,
        constants: Sequence[tuple[str, float]] = DEFAULT_CONSTANTS,
        max_problem_numbers: int = 16,
        max_variables: int = 8,
    ):
        if operators is None:
            operators = [make_operator(n) for n in DEFAULT_OPERATORS]
        self.operators = {op.name: op for op in operators}
        self.constants = {name: float(value) for name, value in constants}
        self.max_problem_numbers = max_problem_numbers
        self.max_variables = max_variables

        tokens = list(CONTROL_TOKENS) + list(self.operators) + list(self.constants)
        tokens += [f"N_{i}" for i in range(max_problem_numbers)]
        tokens += [f"V_{j}" for j in range(max_variables)]
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary parts overlap")
        self.tokens: list[str] = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

        self.pad_id = self.token_to_id[PAD]
        self.bos_id = self.token_to_id[BOS]
        self.eos_id = self.token_to_id[EOS]
        self.sep_id = self.token_to_id[SEP]
        self.operator_ids = [self.token_to_id[n] for n in self.operators]
        self.constant_ids = [self.token_to_id[n] for n in self.constants]
        self.number_ids = [self.token_to_id[f"N_{i}"] for i in range(max_problem_numbers)]
        self.variable_ids = [self.token_to_id[f"V_{j}"] for j in range(max_variables)]
        self.arity_by_id = {self.token_to_id[n]: op.arity for n, op in self.operators.items()}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.token_to_id

    def encode(self, tokens: Iterable[str]) -> list[int]:
        out = []
        for tok in tokens:
            if tok not in self.token_to_id:
                raise UnknownToken(f"{tok!r} is not in the program vocabulary")
            out.append(self.token_to_id[tok])
        return out

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise UnknownToken(f"token id {i} is out of range")
            out.append(self.tokens[i])
        return out

    def is_operator(self, tok: str) -> bool:
        return tok in self.operators

    def is_argument(self, tok: str) -> bool:
        if tok not in self.token_to_id:
            return False
        return tok in self.constants or bool(_NUMBER_RE.match(tok) or _VARIABLE_RE.match(tok))

    def to_dict(self) -> dict:
        return {
            "operators": [{"name": op.name, "arity": op.arity} for op in self.operators.values()],
            "constants": [{"name": n, "value": v} for n, v in self.constants.items()],
            "max_problem_numbers": self.max_problem_numbers,
            "max_variables": self.max_variables,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProgramVocabulary":
        ops = [make_operator(o["name"], o.get("arity")) for o in d["operators"]]
        consts = [(c["name"], c["value"]) for c in d["constants"]]
        return cls(ops, consts, d.get("max_problem_numbers", 16), d.get("max_variables", 8))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ProgramVocabulary":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


_DEFAULT_VOCAB: ProgramVocabulary | None = None


def default_vocabulary() -> ProgramVocabulary:
    global _DEFAULT_VOCAB
    if _DEFAULT_VOCAB is None:
        _DEFAULT_VOCAB = ProgramVocabulary()
    return _DEFAULT_VOCAB


# ---------------------------------------------------------------------------
# programs

@dataclass(frozen=True)
class Step:
    operator: str
    args: tuple[str, ...]

    def tokens(self) -> tuple[str, ...]:
        return (self.operator,) + self.args


@dataclass(frozen=True)
class Program:
    tokens: tuple[str, ...]
    steps: tuple[Step, ...] = field(compare=False, repr=False)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str], vocab: ProgramVocabulary | None = None) -> "Program":
        """Validate a token sequence ending in EOS and split it into steps."""
        vocab = vocab or default_vocabulary()
        tokens = tuple(tokens)
        for tok in tokens:
            if tok not in vocab:
                raise UnknownToken(f"{tok!r} is not in the program vocabulary")
        if not tokens or tokens[-1] != EOS:
            raise MalformedStep("program must end with EOS")
        if EOS in tokens[:-1]:
            raise MalformedStep("EOS before end of program")

        steps = []
        chunk: list[str] = []
        for tok in tokens:
            if tok in (SEP, EOS):
                steps.append(_parse_step(chunk, vocab, len(steps)))
                chunk = []
            else:
                chunk.append(tok)
        return cls(tokens, tuple(steps))

    def render(self) -> str:
        return f" {STEP_DELIMITER} ".join(" ".join(s.tokens()) for s in self.steps)

    def __len__(self):
        return len(self.tokens)


def _parse_step(chunk: list[str], vocab: ProgramVocabulary, index: int) -> Step:
    if not chunk:
        raise MalformedStep(f"step {index} is empty")
    op, args = chunk[0], tuple(chunk[1:])
    if not vocab.is_operator(op):
        raise MalformedStep(f"step {index} starts with {op!r}, not an operator")
    for a in args:
        if vocab.is_operator(a) or a in CONTROL_TOKENS:
            raise MalformedStep(f"step {index}: {a!r} cannot be an argument")
    arity = vocab.operators[op].arity
    if len(args) != arity:
        raise MalformedStep(f"step {index}: {op} takes {arity} arguments, got {len(args)}")
    return Step(op, args)


def segment(raw_program: str, vocab: ProgramVocabulary | None = None) -> Program:
    """Parse ``"Minus C_3 N_0 ; Half V_0"`` into an EOS-terminated Program."""
    vocab = vocab or default_vocabulary()
    parts = [p.split() for p in raw_program.replace(",", " ").split(STEP_DELIMITER)]
    tokens: list[str] = []
    for i, part in enumerate(parts):
        if i:
            tokens.append(SEP)
        tokens.extend(part)
    tokens.append(EOS)
    return Program.from_tokens(tokens, vocab)


def render(program: Program) -> str:
    return program.render()


# ---------------------------------------------------------------------------
# number mapping

@dataclass(frozen=True)
class NumberMap:
    values: tuple[float, ...]

    def __getitem__(self, i: int) -> float:
        if not 0 <= i < len(self.values):
            raise MissingNumber(f"N_{i} is not defined (problem has {len(self.values)} numbers)")
        return self.values[i]

    def __len__(self):
        return len(self.values)


# ---------------------------------------------------------------------------
# execution

@dataclass(frozen=True)
class ExecutionResult:
    variables: tuple[float, ...]
    final: float


def resolve_argument(tok: str, vocab: ProgramVocabulary, numbers: NumberMap, bound: Sequence[float]) -> float:
    if tok in vocab.constants:
        return vocab.constants[tok]
    m = _NUMBER_RE.match(tok)
    if m:
        return numbers[int(m.group(1))]
    m = _VARIABLE_RE.match(tok)
    if m:
        j = int(m.group(1))
        if j >= len(bound):
            raise DanglingReference(f"{tok} referenced before it is bound (step {len(bound)})")
        return bound[j]
    raise UnknownToken(f"{tok!r} is not an argument token")


def execute(
    program: Program,
    numbers: NumberMap | Sequence[float],
    vocab: ProgramVocabulary | None = None,
    n_steps: int | None = None,
) -> ExecutionResult:
    """Run the steps in order; step k binds V_k and the last binding is the result.

    Raises an ExecutionError subclass on any failure, never returns NaN.
    """
    vocab = vocab or default_vocabulary()
    if not isinstance(numbers, NumberMap):
        numbers = NumberMap(tuple(float(v) for v in numbers))
    steps = program.steps if n_steps is None else program.steps[:n_steps]
    if len(steps) > vocab.max_variables:
        raise MalformedStep(f"{len(steps)} steps exceed the {vocab.max_variables} variable slots")
    bound: list[float] = []
    for step in steps:
        op = vocab.operators[step.operator]
        args = [resolve_argument(a, vocab, numbers, bound) for a in step.args]
        bound.append(op(*args))
    if not bound:
        raise MalformedStep("program has no steps")
    return ExecutionResult(tuple(bound), bound[-1])


def choice_tolerance(c: float) -> float:
    return max(1e-2, 1e-3 * abs(c))


def match_choice(z: float, choices: Sequence[float]) -> int:
    """Index of the closest choice within tolerance; lowest index wins ties."""
    if not math.isfinite(z):
        raise ValueError("cannot match a non-finite value")
    best, best_err = None, math.inf
    for i, c in enumerate(choices):
        err = abs(z - c)
        if err <= choice_tolerance(c) and err < best_err:
            best, best_err = i, err
    if best is None:
        raise NoMatch(f"{z!r} matches none of {list(choices)}")
    return best
