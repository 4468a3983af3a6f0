"""Prompt tokenization, part-of-speech tagging, and object/action extraction."""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from .errors import EmptyPrompt, TaggerFailure

PAD_ID, SOS_ID, EOT_ID, UNK_ID = 0, 1, 2, 3
_WORD_RE = re.compile(r"[A-Za-z0-9]+(?:'[A-Za-z]+)?")

VERBS = frozenset(
    """
    place put move push pull pick lift lower drop open close turn rotate slide
    stack unstack take grab grasp hold insert remove pour wipe fold unfold flip
    throw tip tilt squeeze press poke spin roll shake cover uncover attach
    detach hang plug unplug twist bring carry drag knock lay set fill empty
    """.split()
)
DETERMINERS = frozenset("a an the this that these those some any each every its their his her my your".split())
PREPOSITIONS = frozenset(
    "to of in on onto into from at by with without over under above below behind beside between near "
    "across through toward towards off out up down inside outside along around against".split()
)
# spatial relations are not objects, even where a real tagger would say NOUN
RELATIONS = frozenset("left right top bottom front back side middle center centre edge corner away".split())
ADJECTIVES = frozenset(
    """
    red green blue yellow orange purple pink black white gray grey brown cyan magenta
    small large big little tiny tall short long empty full open closed
    wooden metal plastic glass
    """.split()
)
CONJUNCTIONS = frozenset("and or but then".split())
PRONOUNS = frozenset("it them something someone itself".split())


def split_words(prompt: str) -> list[str]:
    return [w.lower() for w in _WORD_RE.findall(prompt)]


class PosTagger(Protocol):
    name: str
    version: str

    def tag(self, words: Sequence[str]) -> list[str]:
        """Return one universal POS tag (NOUN, VERB, ADJ, ...) per word."""
        ...


class RuleTagger:
    """Lexicon tagger: verb list, closed-class words, colours/sizes as adjectives, everything else NOUN."""

    name = "rule"
    version = "1"

    def tag(self, words: Sequence[str]) -> list[str]:
        tags: list[str] = []
        for i, w in enumerate(words):
            prev = tags[i - 1] if i else None
            if w in DETERMINERS:
                tags.append("DET")
            elif w in PREPOSITIONS:
                tags.append("ADP")
            elif w in CONJUNCTIONS:
                tags.append("CCONJ")
            elif w in PRONOUNS:
                tags.append("PRON")
            elif w in RELATIONS:
                tags.append("ADV")
            elif w in VERBS and prev not in ("DET", "ADJ"):
                tags.append("VERB")
            elif w in ADJECTIVES:
                tags.append("ADJ")
            elif w.isdigit():
                tags.append("NUM")
            else:
                tags.append("NOUN")
        return tags


class SpacyTagger:
    """Adapter for an installed spaCy pipeline; loaded lazily."""

    name = "spacy"

    def __init__(self, model: str = "en_core_web_sm"):
        try:
            import spacy
        except ImportError as exc:
            raise TaggerFailure("external tagger requested but spaCy is not installed") from exc
        try:
            self._nlp = spacy.load(model)
        except OSError as exc:
            raise TaggerFailure(f"spaCy model {model!r} not available") from exc
        self.version = f"{spacy.__version__}:{model}"

    def tag(self, words: Sequence[str]) -> list[str]:
        from spacy.tokens import Doc

        doc = self._nlp(Doc(self._nlp.vocab, words=list(words)))
        return ["NOUN" if t.pos_ == "PROPN" else t.pos_ for t in doc]


class Tokenizer:
    """Whitespace tokenizer with a fixed lexicon; unknown words hash into reserved buckets."""

    name = "lexicon"
    version = "1"

    def __init__(self, vocab_size: int = 512, context_length: int = 16):
        lexicon = sorted(VERBS | DETERMINERS | PREPOSITIONS | RELATIONS | ADJECTIVES | CONJUNCTIONS | PRONOUNS)
        if vocab_size < 4 + len(lexicon) + 16:
            raise ValueError(f"vocab_size {vocab_size} too small for the lexicon")
        self.vocab_size = vocab_size
        self.context_length = context_length
        self._ids = {w: 4 + i for i, w in enumerate(lexicon)}
        self._bucket_base = 4 + len(lexicon)
        self._n_buckets = vocab_size - self._bucket_base

    def word_id(self, word: str) -> int:
        if word in self._ids:
            return self._ids[word]
        return self._bucket_base + zlib.crc32(word.encode("utf-8")) % self._n_buckets

    def encode_words(self, words: Sequence[str]) -> list[int]:
        """``[SOS] w_1 .. w_n [EOT]``; word ``k`` lands at position ``k + 1``."""
        body = [self.word_id(w) for w in words][: self.context_length - 2]
        return [SOS_ID, *body, EOT_ID]

    def pad(self, tokens: Sequence[int]) -> list[int]:
        return list(tokens) + [PAD_ID] * (self.context_length - len(tokens))


@dataclass
class PromptAnnotation:
    prompt: str
    tokens: list[int]
    objects: list[str]
    actions: list[str]
    action_token_mask: list[int]
    words: list[str] = field(default_factory=list)
    tags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.action_token_mask) != len(self.tokens):
            raise ValueError("action_token_mask length must equal token count")


def _noun_phrases(words: Sequence[str], tags: Sequence[str]) -> list[str]:
    phrases, cur, has_noun = [], [], False
    for w, t in zip(words, tags):
        if t == "ADJ" or t == "NOUN":
            if t == "ADJ" and has_noun:
                # adjective after the head noun starts a new phrase
                phrases.append(" ".join(cur))
                cur, has_noun = [], False
            cur.append(w)
            has_noun = has_noun or t == "NOUN"
        else:
            if cur and has_noun:
                phrases.append(" ".join(cur))
            cur, has_noun = [], False
    if cur and has_noun:
        phrases.append(" ".join(cur))
    return phrases


def _dedupe(items):
    return list(dict.fromkeys(items))


def extract_queries(prompt: str, tagger: PosTagger | None = None, tokenizer: Tokenizer | None = None) -> PromptAnnotation:
    """Tag ``prompt`` and split it into object noun phrases and action verbs.

    Every token position holding an action verb is set in the action mask.
    """
    if not prompt or not prompt.strip():
        raise EmptyPrompt("prompt is empty")
    tagger = tagger or RuleTagger()
    tokenizer = tokenizer or Tokenizer()
    words = split_words(prompt)
    if not words:
        raise EmptyPrompt(f"prompt {prompt!r} has no word tokens")
    try:
        tags = list(tagger.tag(words))
    except TaggerFailure:
        raise
    except Exception as exc:
        raise TaggerFailure(f"tagger {getattr(tagger, 'name', tagger)!r} failed: {exc}") from exc
    if len(tags) != len(words):
        raise TaggerFailure(f"tagger returned {len(tags)} tags for {len(words)} words")
    tokens = tokenizer.encode_words(words)
    mask = [0] * len(tokens)
    actions = []
    for k, (w, t) in enumerate(zip(words, tags)):
        if t == "VERB" and k + 1 < len(tokens) - 1:
            mask[k + 1] = 1
            actions.append(w)
    return PromptAnnotation(
        prompt=prompt,
        tokens=tokens,
        objects=_dedupe(_noun_phrases(words, tags)),
        actions=_dedupe(actions),
        action_token_mask=mask,
        words=words,
        tags=tags,
    )


def make_tagger(kind: str) -> PosTagger:
    if kind == "rule":
        return RuleTagger()
    if kind == "external":
        return SpacyTagger()
    raise ValueError(f"unknown tagger {kind!r}")
