"""Byte-level tokenizer and synthetic domain-shifted QA corpora.

Questions and answers come from small templated grammars. A general grammar
produces the pretraining corpus; each domain adds its own lexicon (words that
never occur in the general grammar) and its own question templates. Two shift
knobs interpolate between the two: ``lexicon_shift`` is the per-slot
probability of drawing a domain word, ``template_novelty`` the probability of
drawing a domain template.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BOS, EOS, PAD = 256, 257, 258
VOCAB_SIZE = 259
SPECIALS = (BOS, EOS, PAD)


# ---------------------------------------------------------------------------
# tokenizer


def tokenize(text, add_bos: bool = True, add_eos: bool = True) -> list[int]:
    """UTF-8 bytes of ``text`` (str or bytes) framed by BOS/EOS."""
    raw = text if isinstance(text, (bytes, bytearray)) else text.encode("utf-8", "surrogateescape")
    out = list(raw)
    if add_bos:
        out.insert(0, BOS)
    if add_eos:
        out.append(EOS)
    return out


def detokenize(tokens, as_bytes: bool = False):
    """Inverse of :func:`tokenize`; special tokens are dropped."""
    raw = bytes(t for t in tokens if t < 256)
    if as_bytes:
        return raw
    return raw.decode("utf-8", "surrogateescape")


def format_prompt(question: str) -> str:
    return f"Q: {question}\nA:"


def encode_prompt(question: str) -> list[int]:
    """Query token sequence: BOS + prompt bytes, no EOS (the model continues it)."""
    return tokenize(format_prompt(question), add_eos=False)


def format_document(question: str, answer: str) -> str:
    return f"{format_prompt(question)} {answer}"


def decode_response(tokens) -> str:
    """Text of a generated response, cut at EOS."""
    cut = list(tokens)
    if EOS in cut:
        cut = cut[:cut.index(EOS)]
    return detokenize(cut).strip()


# ---------------------------------------------------------------------------
# grammars

GENERAL_NOUNS = (
    "river", "garden", "window", "market", "teacher", "bridge", "school", "kitchen",
    "letter", "music", "winter", "forest", "village", "station", "table", "candle",
    "mirror", "ladder", "basket", "blanket", "bottle", "camera", "jacket", "pencil",
    "ticket", "wallet", "bicycle", "harbor", "library", "museum", "office", "painter",
    "singer", "sailor", "engine", "garage", "hammer", "island", "lantern", "meadow",
    "ocean", "palace", "rocket", "tunnel", "valley", "wagon",
)
GENERAL_ADJS = ("bright", "quiet", "clean", "strong", "warm", "simple", "useful",
                "steady", "gentle", "safe", "ready", "fresh")

# (question, answers) pairs; slots {a}, {b} take nouns, {c} an adjective. Each
# question has several phrasings that open differently, so the first answer
# tokens are genuinely uncertain while the rest follows from the opening.
GENERAL_TEMPLATES = (
    ("where can i find a {c} {a} near the {b}?",
     ("a {c} {a} is usually near the {b}.", "you can find a {c} {a} near the {b}.",
      "look near the {b} for a {c} {a}.")),
    ("how do i keep the {a} {c}?",
     ("keep the {a} {c} by checking it every day.", "check the {a} every day to keep it {c}.",
      "to keep the {a} {c}, check it every day.")),
    ("why is the {a} next to the {b}?",
     ("the {a} is next to the {b} because it is useful there.", "because the {a} is useful next to the {b}.",
      "it is useful to keep the {a} next to the {b}.")),
    ("what should i bring to the {c} {a}?",
     ("bring a small bag to the {c} {a}.", "a small bag is enough for the {c} {a}.",
      "you should bring a small bag to the {c} {a}.")),
    ("can the {a} help the {b}?",
     ("yes, the {a} can help the {b} a lot.", "the {a} can help the {b} a lot.",
      "it can, the {a} helps the {b} a lot.")),
    ("when does the {a} open?",
     ("the {a} opens early in the morning.", "early in the morning the {a} opens.",
      "it opens early in the morning.")),
    ("who takes care of the {a} and the {b}?",
     ("the {a} and the {b} are cared for by the town.", "the town takes care of the {a} and the {b}.",
      "people from the town care for the {a} and the {b}.")),
    ("is the {a} more {c} than the {b}?",
     ("the {a} is more {c} than the {b} in most cases.", "in most cases the {a} is more {c} than the {b}.",
      "yes, the {a} is more {c} than the {b}.")),
)


@dataclass(frozen=True)
class Grammar:
    nouns: tuple
    adjs: tuple
    templates: tuple


GENERAL = Grammar(GENERAL_NOUNS, GENERAL_ADJS, GENERAL_TEMPLATES)

DOMAIN_GRAMMARS = {
    "agri": Grammar(
        ("sorghum", "millet", "cassava", "aphids", "mulch", "compost", "tillage", "fallow",
         "nitrogen", "irrigation", "silage", "legumes", "seedlings", "fungicide", "topsoil",
         "manure", "orchard", "paddy"),
        ("organic", "hybrid", "rainfed", "perennial", "drought", "saline"),
        (
            ("how should i treat {a} affected by {b}?",
             ("treat {a} affected by {b} with careful rotation.", "careful rotation helps {a} affected by {b}.")),
            ("what is the ideal {c} method for {a}?",
             ("the ideal {c} method for {a} depends on the season.", "it depends on the season for {c} {a}.")),
            ("which {a} variety resists {b} best?",
             ("the {a} variety that resists {b} best is the local one.", "the local {a} variety resists {b} best.")),
            ("how much {b} does {c} {a} require?",
             ("{c} {a} requires moderate {b} each season.", "a moderate amount of {b} each season for {c} {a}.")),
        ),
    ),
    "geo": Grammar(
        ("basalt", "granite", "moraine", "sediment", "aquifer", "magma", "tectonics", "glacier",
         "erosion", "limestone", "quartz", "faultline", "delta", "plateau", "volcano", "bedrock"),
        ("porous", "igneous", "alluvial", "seismic", "sedimentary", "volcanic"),
        (
            ("what causes {b} in {c} {a} regions?",
             ("{b} in {c} {a} regions comes from slow movement.", "slow movement causes {b} in {c} {a} regions.")),
            ("how old is the {c} {a} under the {b}?",
             ("the {c} {a} under the {b} is very old.", "very old, the {c} {a} under the {b} formed long ago.")),
            ("where does {a} form near {b}?",
             ("{a} forms near {b} where the ground shifts.", "where the ground shifts, {a} forms near {b}.")),
            ("why does {c} {a} contain {b}?",
             ("{c} {a} contains {b} because of deep pressure.", "deep pressure puts {b} into {c} {a}.")),
        ),
    ),
    "med": Grammar(
        ("insulin", "fever", "antibiotic", "migraine", "asthma", "diabetes", "vaccine", "dosage",
         "symptom", "infection", "allergy", "inhaler", "ibuprofen", "rash", "cough", "tablet"),
        ("chronic", "acute", "mild", "severe", "viral", "bacterial"),
        (
            ("what is the usual {b} for {c} {a}?",
             ("the usual {b} for {c} {a} is set by a physician.", "a physician sets the usual {b} for {c} {a}.")),
            ("can {a} cause {c} {b}?",
             ("{a} can cause {c} {b} in some patients.", "in some patients {a} can cause {c} {b}.")),
            ("how do i manage {a} with {b}?",
             ("manage {a} with {b} and regular monitoring.", "regular monitoring helps manage {a} with {b}.")),
            ("should i take {a} for {c} {b}?",
             ("take {a} for {c} {b} only if advised.", "only if advised, take {a} for {c} {b}.")),
        ),
    ),
}


@dataclass(frozen=True)
class DomainSpec:
    name: str
    lexicon_shift: float = 1.0
    template_novelty: float = 1.0
    size: int = 128

    def __post_init__(self):
        if self.name not in DOMAIN_GRAMMARS and self.name != "general":
            raise ValueError(f"unknown domain {self.name!r}; known: {sorted(DOMAIN_GRAMMARS)}")
        for knob in ("lexicon_shift", "template_novelty"):
            v = getattr(self, knob)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{knob} must lie in [0, 1], got {v}")
        if self.size < 1:
            raise ValueError("size must be >= 1")

    @property
    def grammar(self) -> Grammar:
        return GENERAL if self.name == "general" else DOMAIN_GRAMMARS[self.name]


@dataclass(frozen=True)
class QAPair:
    question: str
    answer: str
    domain: str

    @property
    def question_tokens(self) -> list[int]:
        return encode_prompt(self.question)

    @property
    def answer_tokens(self) -> list[int]:
        return tokenize(self.answer, add_bos=False)


@dataclass(frozen=True)
class Cohort:
    """Unlabeled queries of one domain; carries no reference answers."""
    cohort_id: str
    domain: str
    questions: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not self.questions:
            raise ValueError("cohort must be nonempty")
        object.__setattr__(self, "questions", tuple(self.questions))

    @property
    def queries(self) -> list[list[int]]:
        return [encode_prompt(q) for q in self.questions]

    def __len__(self):
        return len(self.questions)


def _sample_pair(rng: np.random.Generator, domain: Grammar, lexicon_shift: float,
                 template_novelty: float, tag: str) -> QAPair:
    templates = domain.templates if rng.random() < template_novelty else GENERAL.templates
    q_t, answers = templates[rng.integers(len(templates))]
    a_t = answers[rng.integers(len(answers))]

    def pick(general, specific):
        pool = specific if rng.random() < lexicon_shift else general
        return pool[rng.integers(len(pool))]

    a = pick(GENERAL.nouns, domain.nouns)
    b = pick(GENERAL.nouns, domain.nouns)
    while b == a:
        b = pick(GENERAL.nouns, domain.nouns)
    c = pick(GENERAL.adjs, domain.adjs)
    slots = {"a": a, "b": b, "c": c}
    return QAPair(q_t.format(**slots), a_t.format(**slots), tag)


def generate_pairs(spec: DomainSpec, seed: int) -> list[QAPair]:
    rng = np.random.default_rng([seed, 7919])
    g = spec.grammar
    return [_sample_pair(rng, g, spec.lexicon_shift, spec.template_novelty, spec.name)
            for _ in range(spec.size)]


def generate_pretrain_corpus(seed: int, size: int) -> list[str]:
    """``size`` general-grammar documents of the form 'Q: ...\\nA: ...'."""
    rng = np.random.default_rng([seed, 104729])
    docs = []
    for _ in range(size):
        p = _sample_pair(rng, GENERAL, 0.0, 0.0, "general")
        docs.append(format_document(p.question, p.answer))
    return docs


def corpus_tokens(docs) -> np.ndarray:
    """Token stream of BOS/EOS-framed documents."""
    out = []
    for d in docs:
        out.extend(tokenize(d))
    return np.asarray(out, dtype=np.int64)


def generate_cohort(spec: DomainSpec, seed: int, cohort_id: str | None = None):
    """Return (Cohort, reference answers). References are for scoring only."""
    pairs = generate_pairs(spec, seed)
    cid = cohort_id or f"{spec.name}-s{seed}"
    return Cohort(cid, spec.name, tuple(p.question for p in pairs)), [p.answer for p in pairs]


def domain_words(name: str) -> set[str]:
    g = DOMAIN_GRAMMARS[name]
    return set(g.nouns) | set(g.adjs)


# ---------------------------------------------------------------------------
# JSON-lines IO


def write_pairs_jsonl(pairs, path, include_answers: bool = True):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            rec = {"q": p.question, "domain": p.domain}
            if include_answers:
                rec["a"] = p.answer
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def write_cohort_jsonl(cohort: Cohort, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for q in cohort.questions:
            fh.write(json.dumps({"q": q, "domain": cohort.domain}, ensure_ascii=False) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_cohort_jsonl(path, cohort_id: str | None = None) -> Cohort:
    recs = read_jsonl(path)
    if not recs:
        raise ValueError(f"{path}: empty cohort file")
    return Cohort(cohort_id or Path(path).stem, recs[0].get("domain", "unknown"),
                  tuple(r["q"] for r in recs))
