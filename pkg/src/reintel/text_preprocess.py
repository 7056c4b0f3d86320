"""Post text normalization and raw-text count statistics.

The pipeline is emoticons -> elongation -> COVID-term unification -> word
segmentation. Misspelled words are deliberately left alone: keeping the
original forms scores better than correcting them.
"""

from __future__ import annotations

import itertools
import subprocess
from dataclasses import dataclass, astuple
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol

import regex

from reintel import ReintelError

HAPPY_TOKEN = "vui"
SAD_TOKEN = "buồn"
CANONICAL_COVID = "covid"
DEFAULT_COVID_VARIANTS = frozenset(
    {"covid", "ncov", "convid", "covid19", "covid-19", "ncov-2019", "sars-cov-2", "corona", "coronavirus"}
)
URL_PREFIXES = ("http://", "https://", "www.")

_GRAPHEME = regex.compile(r"\X")


class SegmenterError(ReintelError):
    def __init__(self, message: str, text_id: str | None = None):
        self.text_id = text_id
        if text_id is not None:
            message = f"post {text_id}: {message}"
        super().__init__(message)


class EmoticonMap:
    """Emoticon -> sentiment token lookup with a compiled longest-match scanner.

    A match also swallows repeats of a trailing punctuation character, so
    ``:)))`` and ``=]]]`` are single emoticons. Emoticons that start or end
    with a letter or digit (``:D``, ``D:``) only match away from word
    characters, which keeps ``ID:`` and ``10:30`` intact.
    """

    def __init__(self, pairs: Mapping[str, str]):
        pairs = dict(pairs)
        for key, value in pairs.items():
            if not key:
                raise ValueError("emoticon keys must be non-empty")
            clash = [k for k in pairs if k in value]
            if clash:
                raise ValueError(f"sentiment token {value!r} contains emoticon {clash[0]!r}")
        self.pairs = pairs
        self._pattern = self._compile(pairs) if pairs else None

    @staticmethod
    def _compile(pairs: Mapping[str, str]):
        alternatives = []
        for key in sorted(pairs, key=lambda k: (-len(k), k)):
            body = regex.escape(key)
            last = key[-1]
            if not last.isalnum() and not last.isspace():
                body += "(?:" + regex.escape(last) + ")*"
            if key[0].isalnum():
                body = r"(?<!\w)" + body
            if last.isalnum():
                body += r"(?!\w)"
            alternatives.append(f"(?P<e{len(alternatives)}>{body})")
        return regex.compile("|".join(alternatives))

    def __len__(self):
        return len(self.pairs)

    def lookup_match(self, m) -> str:
        raw = m.group(0)
        if raw in self.pairs:
            return self.pairs[raw]
        # matched with extra trailing repeats: strip them back to a key
        while raw and raw not in self.pairs:
            raw = raw[:-1]
        return self.pairs[raw]

    @classmethod
    def from_file(cls, path, happy_token: str = HAPPY_TOKEN, sad_token: str = SAD_TOKEN) -> "EmoticonMap":
        """Read ``emoticon<TAB>happy|sad`` lines."""
        tokens = {"happy": happy_token, "sad": sad_token}
        pairs = {}
        text = Path(path).read_text(encoding="utf-8")
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                emoticon, label = line.rstrip("\n").split("\t")
            except ValueError:
                raise ValueError(f"{path}:{line_no}: expected 'emoticon<TAB>label'") from None
            label = label.strip().lower()
            if label not in tokens:
                raise ValueError(f"{path}:{line_no}: label must be happy or sad, got {label!r}")
            pairs[emoticon] = tokens[label]
        return cls(pairs)

    @classmethod
    def default(cls, happy_token: str = HAPPY_TOKEN, sad_token: str = SAD_TOKEN) -> "EmoticonMap":
        with resources.as_file(resources.files("reintel") / "data" / "emoticons.tsv") as path:
            return cls.from_file(path, happy_token, sad_token)


def normalize_emoticons(text: str, emoticons: EmoticonMap) -> str:
    """Replace each emoticon with its sentiment word.

    The word is separated from neighbouring non-space characters by a single
    space; existing whitespace is left as it is.
    """
    if emoticons._pattern is None or not text:
        return text
    out = []
    pos = 0
    for m in emoticons._pattern.finditer(text):
        start, end = m.span()
        out.append(text[pos:start])
        token = emoticons.lookup_match(m)
        if start > 0 and not text[start - 1].isspace():
            token = " " + token
        if end < len(text) and not text[end].isspace():
            token = token + " "
        out.append(token)
        pos = end
    out.append(text[pos:])
    return "".join(out)


def compress_elongation(text: str, max_run: int = 2) -> str:
    """Cap runs of an identical grapheme cluster at ``max_run``.

    >>> compress_elongation("Coooool")
    'Cool'
    """
    if max_run < 1:
        raise ValueError("max_run must be >= 1")
    clusters = _GRAPHEME.findall(text)
    return "".join(
        "".join(itertools.islice(run, max_run)) for _, run in itertools.groupby(clusters)
    )


def _covid_pattern(variants: frozenset[str]):
    alts = "|".join(regex.escape(v) for v in sorted(variants, key=lambda v: (-len(v), v)))
    return regex.compile(rf"(?<!\w)(?:{alts})(?!\w)", regex.IGNORECASE)


_DEFAULT_COVID_RE = _covid_pattern(DEFAULT_COVID_VARIANTS)


def unify_covid_terms(
    text: str,
    variants: Iterable[str] = DEFAULT_COVID_VARIANTS,
    canonical: str = CANONICAL_COVID,
) -> str:
    variants = frozenset(v.lower() for v in variants)
    if not variants:
        raise ValueError("variants must be non-empty")
    if canonical.lower() not in variants:
        raise ValueError(f"canonical term {canonical!r} must be one of the variants")
    pattern = _DEFAULT_COVID_RE if variants == DEFAULT_COVID_VARIANTS else _covid_pattern(variants)
    return pattern.sub(canonical, text)


class Segmenter(Protocol):
    """Splits text into word tokens (multi-syllable words may contain ``_``)."""

    def __call__(self, text: str) -> list[str]: ...


def whitespace_segmenter(text: str) -> list[str]:
    return text.split()


class SubprocessSegmenter:
    """Line-in/line-out adapter around an external segmenter process.

    Each request is one line of text on stdin; the process must answer with one
    line of space-separated tokens. VnCoreNLP can be wrapped this way with a
    small server script.
    """

    def __init__(self, command: list[str]):
        self.command = list(command)
        self._proc: subprocess.Popen | None = None

    def _ensure_started(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        return self._proc

    def __call__(self, text: str) -> list[str]:
        proc = self._ensure_started()
        line = " ".join(text.split())
        try:
            proc.stdin.write(line + "\n")
            proc.stdin.flush()
            reply = proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise SegmenterError(f"segmenter process failed: {exc}") from exc
        if reply == "" and proc.poll() is not None:
            raise SegmenterError(f"segmenter process exited with code {proc.returncode}")
        return reply.split()

    def close(self):
        if self._proc is not None:
            self._proc.stdin.close()
            self._proc.wait(timeout=5)
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_DEFAULT_EMOTICONS: EmoticonMap | None = None


def default_emoticons() -> EmoticonMap:
    global _DEFAULT_EMOTICONS
    if _DEFAULT_EMOTICONS is None:
        _DEFAULT_EMOTICONS = EmoticonMap.default()
    return _DEFAULT_EMOTICONS


def preprocess(
    text: str,
    segmenter: Callable[[str], list[str]] = whitespace_segmenter,
    emoticons: EmoticonMap | None = None,
    covid_variants: Iterable[str] = DEFAULT_COVID_VARIANTS,
    max_run: int = 2,
    text_id: str | None = None,
    separator: str = " ",
) -> str:
    """Normalize one post text and return its segmented form.

    No spelling correction is applied.
    """
    if emoticons is None:
        emoticons = default_emoticons()
    text = normalize_emoticons(text, emoticons)
    text = compress_elongation(text, max_run)
    text = unify_covid_terms(text, covid_variants)
    try:
        tokens = segmenter(text)
    except SegmenterError as exc:
        raise SegmenterError(str(exc), text_id) from exc
    except Exception as exc:
        raise SegmenterError(f"segmenter raised {type(exc).__name__}: {exc}", text_id) from exc
    return separator.join(tokens)


@dataclass(frozen=True)
class TextStats:
    n_hashtags: int = 0
    n_urls: int = 0
    n_chars: int = 0
    n_words: int = 0
    n_question_marks: int = 0
    n_exclaim_marks: int = 0

    FIELDS = ("n_hashtags", "n_urls", "n_chars", "n_words", "n_question_marks", "n_exclaim_marks")

    def as_tuple(self) -> tuple[int, ...]:
        return astuple(self)


def text_statistics(raw_text: str) -> TextStats:
    """Counts over the original (un-normalized) post text."""
    words = raw_text.split()
    return TextStats(
        n_hashtags=sum(1 for w in words if w.startswith("#")),
        n_urls=sum(1 for w in words if w.lower().startswith(URL_PREFIXES)),
        n_chars=len(_GRAPHEME.findall(raw_text)),
        n_words=len(words),
        n_question_marks=raw_text.count("?"),
        n_exclaim_marks=raw_text.count("!"),
    )
