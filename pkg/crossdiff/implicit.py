"""
Implicit spatial relation detection over expression corpora.

Rule first, language model as backup: texts with an explicit spatial marker
are excluded, texts matching an implicit pattern are accepted, and only the
remaining texts are sent to the language model when one is enabled. Every
record the model accepts is flagged for review.
"""

import json
import logging
import os
import re
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Pattern, Sequence, Tuple, Union

import openai
import requests
import yaml

from .errors import ConfigError, LLMParseError, LLMUnavailableError

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"
CATEGORIES = ("physical", "functional", "contextual")


def _compile(pattern: str) -> Pattern:
    return re.compile(rf"\b(?:{pattern})\b", re.IGNORECASE)


class PatternLibrary:
    """Explicit markers and the three implicit pattern categories, loaded from YAML."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else DATA_DIR / "implicit_patterns.yaml"
        try:
            with open(self.path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"Failed to load pattern library from {self.path}: {e}")
        self.explicit_sources: List[str] = list(data.get("explicit_markers", []))
        implicit = data.get("implicit_patterns", {})
        self.implicit_sources: Dict[str, List[str]] = {c: list(implicit.get(c, [])) for c in CATEGORIES}
        self._check()
        self.explicit = [_compile(p) for p in self.explicit_sources]
        self.implicit = {c: [_compile(p) for p in self.implicit_sources[c]] for c in CATEGORIES}

    def _check(self):
        issues = self.validate()
        if issues:
            raise ConfigError(f"Invalid pattern library {self.path}: " + "; ".join(issues))

    def validate(self) -> List[str]:
        """Return the problems of the library; empty when it is usable."""
        issues = []
        if not self.explicit_sources:
            issues.append("no explicit markers")
        implicit_all = [p for c in CATEGORIES for p in self.implicit_sources[c]]
        for category in CATEGORIES:
            if not self.implicit_sources[category]:
                issues.append(f"category '{category}' has no patterns")
        shared = sorted(set(p.lower() for p in self.explicit_sources) & set(p.lower() for p in implicit_all))
        if shared:
            issues.append(f"patterns in both libraries: {', '.join(shared)}")
        for pattern in self.explicit_sources + implicit_all:
            try:
                re.compile(pattern)
            except re.error as e:
                issues.append(f"pattern '{pattern}' does not compile: {e}")
        return issues


_library: Optional[PatternLibrary] = None


def get_pattern_library() -> PatternLibrary:
    global _library
    if _library is None:
        _library = PatternLibrary()
    return _library


def match_explicit(text: str, lib: PatternLibrary) -> bool:
    return any(p.search(text) for p in lib.explicit)


def match_implicit(text: str, lib: PatternLibrary) -> Tuple[bool, Optional[str]]:
    for category in CATEGORIES:
        if any(p.search(text) for p in lib.implicit[category]):
            return True, category
    return False, None


# ---------------------------------------------------------------------------
# Language-model backends
# ---------------------------------------------------------------------------

@dataclass
class PromptTemplate:
    system: str
    template: str

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None) -> "PromptTemplate":
        path = Path(path) if path is not None else DATA_DIR / "llm_prompt.yaml"
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
        return cls(data["system"], data["template"])

    def build(self, text: str) -> str:
        return self.template.format(text=text.replace('"', "'"))


def parse_label(raw: Any) -> bool:
    """Map a ``yes`` / ``no`` answer to a boolean."""
    if not isinstance(raw, str):
        raise LLMParseError(f"Expected a yes/no label, got {raw!r}")
    label = raw.strip().strip(".!").lower()
    if label == "yes":
        return True
    if label == "no":
        return False
    raise LLMParseError(f"Unparseable label {raw!r}")


class HttpLLMBackend:
    """
    POSTs ``{"prompt": ...}`` and expects ``{"label": "yes" | "no"}``.

    Transport failures are retried with exponential backoff; after the last
    attempt ``LLMUnavailableError`` is raised.
    """

    def __init__(self, url: str, api_key: Optional[str] = None, timeout: float = 30.0,
                 retries: int = 3, backoff: float = 0.5, sleep: Callable[[float], None] = time.sleep):
        if not url:
            raise ConfigError("The HTTP language-model backend needs an endpoint URL")
        self.url = url
        self.timeout = timeout
        self.retries = max(retries, 1)
        self.backoff = backoff
        self.sleep = sleep
        self.session = requests.Session()
        self.session.headers.update({"Content-Type": "application/json", "User-Agent": "crossdiff/0.1.0"})
        if api_key:
            self.session.headers.update({"Authorization": f"Bearer {api_key}"})

    def label(self, prompt: str, system: str = "") -> str:
        last_error: Optional[Exception] = None
        for attempt in range(self.retries):
            try:
                response = self.session.post(self.url, json={"prompt": prompt}, timeout=self.timeout)
                response.raise_for_status()
            except requests.RequestException as e:
                last_error = e
                logger.warning("LLM request %d/%d failed: %s", attempt + 1, self.retries, e)
                if attempt + 1 < self.retries:
                    self.sleep(self.backoff * (2 ** attempt))
                continue
            try:
                return response.json()["label"]
            except (ValueError, KeyError, TypeError) as e:
                raise LLMParseError(f"Malformed backend response: {e}")
        raise LLMUnavailableError(f"Backend {self.url} unavailable after {self.retries} attempts: {last_error}")


class OpenAILLMBackend:
    """Chat-completions client answering the same yes/no prompt."""

    def __init__(self, api_key: str, model: str = "gpt-3.5-turbo", timeout: float = 30.0, max_tokens: int = 3):
        if not api_key:
            raise ConfigError("The OpenAI backend needs an API key (implicit.api_key or OPENAI_API_KEY)")
        self.client = openai.OpenAI(api_key=api_key, timeout=timeout)
        self.model = model
        self.max_tokens = max_tokens

    def label(self, prompt: str, system: str = "") -> str:
        messages = ([{"role": "system", "content": system}] if system else []) + [{"role": "user", "content": prompt}]
        try:
            response = self.client.chat.completions.create(model=self.model, messages=messages,
                                                           max_tokens=self.max_tokens, temperature=0.0)
        except openai.OpenAIError as e:
            raise LLMUnavailableError(f"OpenAI request failed: {e}")
        return response.choices[0].message.content


def llm_classify(text: str, backend, prompt: Optional[PromptTemplate] = None) -> bool:
    """
    Ask ``backend`` whether ``text`` carries an implicit relation.

    Raises:
        LLMUnavailableError: the backend could not be reached.
        LLMParseError: the answer is neither yes nor no.
    """
    prompt = prompt or PromptTemplate.load()
    return parse_label(backend.label(prompt.build(text), prompt.system))


def create_backend(config):
    """Build the backend named by ``implicit.backend`` (``http``, ``openai`` or ``none``)."""
    kind = config.get("implicit.backend")
    if kind == "none":
        return None
    if kind == "http":
        return HttpLLMBackend(config.get("implicit.llm_url") or os.environ.get("CROSSDIFF_LLM_URL", ""),
                              config.get("implicit.api_key") or os.environ.get("CROSSDIFF_LLM_API_KEY"),
                              timeout=config.get("implicit.timeout"), retries=config.get("implicit.retries"),
                              backoff=config.get("implicit.backoff"))
    if kind == "openai":
        return OpenAILLMBackend(config.get("implicit.api_key") or os.environ.get("OPENAI_API_KEY", ""),
                                model=config.get("implicit.model"), timeout=config.get("implicit.timeout"))
    raise ConfigError(f"Unknown implicit.backend '{kind}'")


# ---------------------------------------------------------------------------
# Subset construction
# ---------------------------------------------------------------------------

@dataclass
class Verdict:
    explicit: bool
    rule_match: bool
    category: Optional[str]
    llm: Optional[bool]
    final: bool
    conflict: bool


@dataclass
class SubsetResult:
    subset: List[Dict[str, Any]]
    audit: List[Dict[str, Any]]
    verdicts: List[Verdict]
    split_counts: Dict[str, int]

    def summary(self) -> Dict[str, Any]:
        return {
            "input": len(self.verdicts),
            "explicit_excluded": sum(v.explicit for v in self.verdicts),
            "rule_accepted": sum(v.final and v.llm is None for v in self.verdicts),
            "llm_accepted": sum(bool(v.llm) for v in self.verdicts),
            "subset": len(self.subset),
            "flagged": sum(v.conflict for v in self.verdicts),
            "splits": dict(self.split_counts),
            "categories": dict(sorted(Counter(r["category"] or "llm" for r in self.subset).items())),
        }


def _rule_verdict(text: str, lib: PatternLibrary) -> Verdict:
    if match_explicit(text, lib):
        return Verdict(True, False, None, None, False, False)
    hit, category = match_implicit(text, lib)
    return Verdict(False, hit, category, None, hit, False)


def build_subset(records: Sequence[Dict[str, Any]], lib: Optional[PatternLibrary] = None, backend=None,
                 use_llm: bool = False, max_concurrency: int = 4,
                 prompt: Optional[PromptTemplate] = None) -> SubsetResult:
    """
    Select the records whose ``text`` expresses an implicit relation.

    Args:
        records: Dicts with at least ``text``; ``id`` and ``split`` are kept as provenance.
        lib: Pattern library (the packaged default when omitted).
        backend: Language-model backend, consulted only when ``use_llm`` is set.
        use_llm: Ask the backend about records the rules leave negative.
        max_concurrency: Upper bound on simultaneous backend requests.

    Returns:
        The subset in input order, the audit log of every backend decision,
        one verdict per input record and accepted counts per input split.
    """
    lib = lib or get_pattern_library()
    if use_llm and backend is None:
        raise ConfigError("use_llm requires a language-model backend")
    verdicts = [_rule_verdict(r["text"], lib) for r in records]

    pending = [i for i, v in enumerate(verdicts) if use_llm and not v.explicit and not v.rule_match]
    if pending:
        prompt = prompt or PromptTemplate.load()
        with ThreadPoolExecutor(max_workers=max(1, max_concurrency)) as pool:
            answers = list(pool.map(lambda i: llm_classify(records[i]["text"], backend, prompt), pending))
        for i, answer in zip(pending, answers):
            v = verdicts[i]
            v.llm, v.final = answer, answer
            v.conflict = answer != v.rule_match

    subset, audit = [], []
    for record, verdict in zip(records, verdicts):
        if verdict.llm is not None:
            audit.append({"id": record.get("id"), "text": record["text"], "rule": verdict.rule_match,
                          "llm": verdict.llm, "flagged": verdict.conflict})
        if verdict.final:
            subset.append({**record, "provenance": "llm" if verdict.llm else "rule",
                           "category": verdict.category, "flagged": verdict.conflict})
    split_counts = Counter(str(r.get("split", "unknown")) for r in subset)
    logger.info("Implicit subset: %d of %d records (%d flagged)", len(subset), len(records),
                sum(v.conflict for v in verdicts))
    return SubsetResult(subset, audit, verdicts, dict(sorted(split_counts.items())))


def read_jsonl(path: Union[str, Path]) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_jsonl(path: Union[str, Path], rows: Sequence[Dict[str, Any]]):
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def records_from_corpus(corpus) -> List[Dict[str, Any]]:
    return [{"id": i, "text": e.text, "split": e.split, "scene_index": e.scene_index, "target": e.target}
            for i, e in enumerate(corpus.expressions)]
