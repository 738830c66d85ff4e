"""Closed referring mini-language: ``[the] <color> <shape> that <motion> [then <motion>]``.

The grammar is small enough to enumerate, so every expression can be parsed
back into a predicate over object appearance and motion schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle")
MOTIONS = ("move-left", "move-right", "move-up", "move-down", "stop", "bounce", "circle")

# Surface forms per motion kind; index 0 is the canonical phrase.
MOTION_PHRASES: dict[str, tuple[tuple[str, ...], ...]] = {
    "move-left": (("moves", "left"), ("goes", "left"), ("slides", "left")),
    "move-right": (("moves", "right"), ("goes", "right"), ("slides", "right")),
    "move-up": (("moves", "up"), ("goes", "up"), ("rises",)),
    "move-down": (("moves", "down"), ("goes", "down"), ("falls",)),
    "stop": (("stops",), ("stays", "still"), ("rests",)),
    "bounce": (("bounces",), ("hops",), ("jumps", "around")),
    "circle": (("circles",), ("spins", "around"), ("turns", "around")),
}

PAD, BOS, EOS, SEG, SCORE = "<pad>", "<bos>", "<eos>", "<seg>", "<score>"
SPECIAL_TOKENS = (PAD, BOS, EOS, SEG, SCORE)

# Selector prompt template; the expression is spliced in at the placeholder.
PROMPT_PREFIX = ("when", "does")
PROMPT_SUFFIX = ("best", "match", "a", "visible", "object", "?")


def _build_vocab() -> tuple[str, ...]:
    words: list[str] = list(SPECIAL_TOKENS)
    fixed = ["the", "that", "then", *COLORS, *SHAPES, *PROMPT_PREFIX, *PROMPT_SUFFIX]
    for phrases in MOTION_PHRASES.values():
        for phrase in phrases:
            fixed.extend(phrase)
    for w in fixed:
        if w not in words:
            words.append(w)
    return tuple(words)


VOCAB: tuple[str, ...] = _build_vocab()
TOKEN_IDS: dict[str, int] = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = TOKEN_IDS[PAD]
BOS_ID = TOKEN_IDS[BOS]
EOS_ID = TOKEN_IDS[EOS]
SEG_ID = TOKEN_IDS[SEG]
SCORE_ID = TOKEN_IDS[SCORE]


class GrammarError(ValueError):
    pass


@dataclass(frozen=True)
class Referring:
    """Parsed meaning of an expression."""

    color: str
    shape: str
    motions: tuple[str, ...]


def phrase(motion: str, variant: int = 0) -> tuple[str, ...]:
    options = MOTION_PHRASES[motion]
    return options[variant % len(options)]


def render(ref: Referring, variant: int = 0) -> tuple[str, ...]:
    """Surface-realize ``ref``; different ``variant`` values give distinct strings.

    Variants enumerate synonym choices first and the optional leading article
    last, so the number of distinct strings is ``2 * prod(len(synonyms))``.
    """
    n_syn = 1
    for m in ref.motions:
        n_syn *= len(MOTION_PHRASES[m])
    article, syn = divmod(variant, n_syn)
    words: list[str] = ["the"] if article % 2 else []
    words += [ref.color, ref.shape, "that"]
    for k, m in enumerate(ref.motions):
        n = len(MOTION_PHRASES[m])
        syn, pick = divmod(syn, n)
        if k:
            words.append("then")
        words.extend(MOTION_PHRASES[m][pick])
    return tuple(words)


def num_variants(ref: Referring) -> int:
    n = 2
    for m in ref.motions:
        n *= len(MOTION_PHRASES[m])
    return n


_PHRASE_LOOKUP = {p: m for m, ps in MOTION_PHRASES.items() for p in ps}


def _parse_motion(words: tuple[str, ...]) -> str:
    if words not in _PHRASE_LOOKUP:
        raise GrammarError(f"unknown motion phrase {' '.join(words)!r}")
    return _PHRASE_LOOKUP[words]


def parse(tokens: tuple[str, ...] | list[str] | str) -> Referring:
    if isinstance(tokens, str):
        tokens = tokens.split()
    words = tuple(tokens)
    if words[:1] == ("the",):
        words = words[1:]
    if len(words) < 4 or words[2] != "that":
        raise GrammarError(f"expected '<color> <shape> that <motion>', got {' '.join(tokens)!r}")
    color, shape = words[0], words[1]
    if color not in COLORS:
        raise GrammarError(f"unknown color {color!r}")
    if shape not in SHAPES:
        raise GrammarError(f"unknown shape {shape!r}")
    rest = words[3:]
    parts: list[tuple[str, ...]] = [()]
    for w in rest:
        if w == "then":
            parts.append(())
        else:
            parts[-1] += (w,)
    if len(parts) > 2:
        raise GrammarError("at most one temporal qualifier ('then') is allowed")
    return Referring(color, shape, tuple(_parse_motion(p) for p in parts))


def _longest_expression() -> int:
    longest = max(len(p) for ps in MOTION_PHRASES.values() for p in ps)
    return 4 + longest + 1 + longest  # the <color> <shape> that <m> then <m>


MAX_EXPRESSION_LEN = _longest_expression()
MAX_PROMPT_LEN = len(PROMPT_PREFIX) + MAX_EXPRESSION_LEN + len(PROMPT_SUFFIX)


def encode(tokens: tuple[str, ...] | list[str]) -> list[int]:
    try:
        return [TOKEN_IDS[w] for w in tokens]
    except KeyError as exc:
        raise GrammarError(f"out-of-vocabulary word {exc.args[0]!r}") from None


def selector_prompt(expression: tuple[str, ...] | list[str]) -> list[str]:
    return [*PROMPT_PREFIX, *expression, *PROMPT_SUFFIX]
