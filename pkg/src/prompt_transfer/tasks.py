"""Synthetic task families, verbalizers and evaluation.

The suite is generated from a *lexicon*: every content word carries one
independent, balanced binary attribute per task type.  A classification task
of type ``t`` labels a word sequence by the majority of attribute ``t``; tasks
of the same type differ only in surface vocabulary (domain) and length, so
they share a decision rule, while tasks of different types depend on
independent attributes.  The generation type ``GEN`` asks for the first two
words whose ``GEN`` attribute is set.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .binio import canonical_json
from .errors import ConfigError, ShapeError, VocabularyError
from .model import NULL_SLOT, SLOT_PREFIX, SPECIAL_TOKENS
from .rng import substream

TASK_TYPES = ("SA", "NLI", "EJ", "PI", "GEN")
CLASSIFICATION_TYPES = ("SA", "NLI", "EJ", "PI")
LABEL_TOKENS = {
    "SA": ("positive", "negative"),
    "NLI": ("yes", "no"),
    "EJ": ("acceptable", "un"),
    "PI": ("true", "false"),
}
THREE_WAY = {"SA": ("positive", "moderate", "negative"), "NLI": ("yes", "neutral", "no")}
NUMERIC_TOKENS = tuple(str(i) for i in range(1, 10))
DOMAINS = ("a", "b", "c")
PAIR_TYPES = ("NLI", "PI")
GEN_TARGET_LEN = 2


def default_vocab(words_per_domain: int = 40) -> list[str]:
    """Specials, verbalizer tokens, numerals, cue slots and content words."""
    labels = []
    for toks in list(LABEL_TOKENS.values()) + list(THREE_WAY.values()):
        labels += [t for t in toks if t not in labels]
    cues = [f"{SLOT_PREFIX}{t}>" for t in TASK_TYPES] + [f"{SLOT_PREFIX}{t}!>" for t in CLASSIFICATION_TYPES]
    cues.append(NULL_SLOT)
    words = [f"{dom}{i:02d}" for dom in DOMAINS for i in range(words_per_domain)]
    return list(SPECIAL_TOKENS) + labels + list(NUMERIC_TOKENS) + cues + words


def cue_token(task_type: str, flipped: bool = False) -> str:
    return f"{SLOT_PREFIX}{task_type}{'!' if flipped else ''}>"


@dataclass(frozen=True)
class TaskSpec:
    name: str
    task_type: str
    label_tokens: tuple[str, ...]
    domain: str
    length: int
    seed: int
    splits: tuple[int, int, int] = (2000, 500, 500)

    @property
    def is_generation(self) -> bool:
        return self.task_type == "GEN"

    @property
    def num_labels(self) -> int:
        return len(self.label_tokens)


@dataclass(frozen=True)
class Example:
    tokens: tuple[str, ...]
    target: int | tuple[str, ...]


@dataclass
class Task:
    spec: TaskSpec
    train: list[Example]
    dev: list[Example]
    test: list[Example]

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def task_type(self) -> str:
        return self.spec.task_type

    @property
    def label_tokens(self) -> tuple[str, ...]:
        return self.spec.label_tokens

    def split(self, which: str) -> list[Example]:
        if which not in ("train", "dev", "test"):
            raise ValueError(f"unknown split {which!r}")
        return getattr(self, which)


@dataclass
class Suite:
    seed: int
    vocab: tuple[str, ...]
    lexicon: dict[str, dict[str, int]]
    tasks: list[Task]
    world_seed: int = 0

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, name: str) -> Task:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tasks]

    @property
    def types(self) -> list[str]:
        return list(dict.fromkeys(t.task_type for t in self.tasks))

    def describe(self) -> dict:
        return {
            "seed": self.seed,
            "world_seed": self.world_seed,
            "tasks": [
                {**asdict(t.spec), "label_tokens": list(t.spec.label_tokens), "splits": list(t.spec.splits)}
                for t in self.tasks
            ],
        }

    def to_json(self) -> str:
        return canonical_json(self.describe())


def build_lexicon(seed: int, vocab: Sequence[str]) -> dict[str, dict[str, int]]:
    """Balanced, independent +/-1 attributes per content word and task type."""
    rng = substream(seed, "lexicon")
    lexicon: dict[str, dict[str, int]] = {}
    for dom in DOMAINS:
        words = [w for w in vocab if len(w) == 3 and w[0] == dom and w[1:].isdigit()]
        if len(words) < 8:
            continue
        attrs = {}
        for t in TASK_TYPES:
            signs = np.array([1] * (len(words) // 2) + [-1] * (len(words) - len(words) // 2))
            attrs[t] = rng.permutation(signs)
        for i, w in enumerate(words):
            lexicon[w] = {t: int(attrs[t][i]) for t in TASK_TYPES}
    return lexicon


def _domain_words(lexicon, domain):
    return sorted(w for w in lexicon if w[0] == domain)


def _classification_example(rng, lexicon, words, task_type, length, label, num_labels):
    pos = [w for w in words if lexicon[w][task_type] > 0]
    neg = [w for w in words if lexicon[w][task_type] < 0]
    if num_labels == 2:
        half = length // 2 + 1
        k = int(rng.integers(half, length + 1))
        n_pos = k if label == 0 else length - k
    else:
        # 0: majority positive, 1: tie, 2: majority negative (even length)
        half = length // 2
        if label == 1:
            n_pos = half
        else:
            k = int(rng.integers(half + 1, length + 1))
            n_pos = k if label == 0 else length - k
    chosen = list(rng.choice(pos, size=n_pos)) + list(rng.choice(neg, size=length - n_pos))
    chosen = [str(w) for w in rng.permutation(chosen)]
    if task_type in PAIR_TYPES:
        cut = length // 2
        return ("<s>", *chosen[:cut], "</s>", *chosen[cut:])
    return ("<s>", *chosen)


def _generation_example(rng, lexicon, words, length):
    on = [w for w in words if lexicon[w]["GEN"] > 0]
    off = [w for w in words if lexicon[w]["GEN"] < 0]
    n_on = int(rng.integers(GEN_TARGET_LEN, length + 1))
    chosen = list(rng.choice(on, size=n_on)) + list(rng.choice(off, size=length - n_on))
    chosen = [str(w) for w in rng.permutation(chosen)]
    target = tuple(w for w in chosen if lexicon[w]["GEN"] > 0)[:GEN_TARGET_LEN]
    return ("<s>", *chosen), target


def generate_examples(spec: TaskSpec, lexicon, count: int, stream: str) -> list[Example]:
    """Deterministic examples for ``spec``; classification labels are balanced."""
    rng = substream(spec.seed, "task-data", spec.name, stream)
    words = _domain_words(lexicon, spec.domain)
    if spec.is_generation:
        out = []
        for _ in range(count):
            toks, target = _generation_example(rng, lexicon, words, spec.length)
            out.append(Example(toks, target))
        return out
    k = spec.num_labels
    labels = rng.permutation(np.arange(count) % k)
    return [
        Example(_classification_example(rng, lexicon, words, spec.task_type, spec.length, int(y), k), int(y))
        for y in labels
    ]


def make_task(spec: TaskSpec, lexicon) -> Task:
    tr, dv, te = spec.splits
    return Task(
        spec,
        generate_examples(spec, lexicon, tr, "train"),
        generate_examples(spec, lexicon, dv, "dev"),
        generate_examples(spec, lexicon, te, "test"),
    )


def build_suite(
    seed: int,
    vocab: Sequence[str],
    types: Sequence[str] = ("SA", "NLI"),
    tasks_per_type: int = 2,
    splits: tuple[int, int, int] = (2000, 500, 500),
    three_way: Sequence[str] = (),
    world_seed: int = 0,
) -> Suite:
    """Generate ``tasks_per_type`` domain-shifted tasks for each task type.

    Task ``j`` of every type draws its words from domain ``DOMAINS[j]`` so
    surface vocabulary is shared across types and differs within a type.
    ``three_way`` lists task names that get a third (tie) label.  The word
    attributes come from ``world_seed``; ``seed`` only drives task sampling,
    so one pretrained backbone serves every suite seed of a world.
    """
    vocab = tuple(vocab)
    for t in types:
        if t not in TASK_TYPES:
            raise ConfigError(f"unknown task type {t!r}")
    if tasks_per_type < 1 or tasks_per_type > len(DOMAINS):
        raise ConfigError(f"tasks_per_type must be in 1..{len(DOMAINS)}")
    lexicon = build_lexicon(world_seed, vocab)
    domains = sorted({w[0] for w in lexicon})
    if len(domains) < tasks_per_type:
        raise VocabularyError(f"vocab has {len(domains)} word domains with >= 8 words, need {tasks_per_type}")
    vocab_set = set(vocab)
    tasks = []
    for t in types:
        for j in range(tasks_per_type):
            name = f"{t.lower()}_{DOMAINS[j]}"
            if t == "GEN":
                labels: tuple[str, ...] = ()
            elif name in three_way:
                if t not in THREE_WAY:
                    raise ConfigError(f"task type {t} has no three-way verbalizer")
                labels = THREE_WAY[t]
            else:
                labels = LABEL_TOKENS[t]
            for tok in labels + ("<s>", "</s>", cue_token(t)):
                if tok not in vocab_set:
                    raise VocabularyError(f"vocab lacks token {tok!r} required by task {name}")
            length = (7 if j % 2 == 0 else 9) if name not in three_way else (8 if j % 2 == 0 else 10)
            spec = TaskSpec(name, t, labels, DOMAINS[j], length, int(substream(seed, "task-seed", name).integers(2**31)), splits)
            tasks.append(make_task(spec, lexicon))
    return Suite(seed, vocab, lexicon, tasks, world_seed)


def unify_label_tokens(suite: Suite) -> Suite:
    """Replace every classification verbalizer by the numerals ``1, 2, ...``."""
    tasks = []
    for task in suite.tasks:
        if task.spec.is_generation:
            tasks.append(task)
            continue
        k = task.spec.num_labels
        if k > len(NUMERIC_TOKENS):
            raise ConfigError(f"task {task.name} has {k} labels, only {len(NUMERIC_TOKENS)} numerals available")
        for tok in NUMERIC_TOKENS[:k]:
            if tok not in suite.vocab:
                raise VocabularyError(f"vocab lacks numeral token {tok!r}")
        spec = replace(task.spec, label_tokens=NUMERIC_TOKENS[:k])
        tasks.append(Task(spec, task.train, task.dev, task.test))
    return Suite(suite.seed, suite.vocab, suite.lexicon, tasks, suite.world_seed)


def pretraining_corpus(suite: Suite, records: int = 20000, seed: int | None = None, null_fraction: float = 0.2,
                       plain_fraction: float = 0.3, distractor_fraction: float = 0.15,
                       family: str = "masked_lm") -> list[list[str]]:
    """Token records carrying the suite's decision rules behind cue slots.

    Prompted records look like ``answer <cue:TYPE> <s> w ...``; null records
    use ``<cue:none>`` with a uniformly random verbalizer token; plain records
    are domain-coherent word streams for masked-token reconstruction.  A
    ``distractor_fraction`` of prompted records answers with a random
    verbalizer token of another type, so foreign label tokens stay
    uninformative under a cue.
    """
    rng = substream(suite.seed if seed is None else seed, "corpus")
    types = [t for t in suite.types if t != "GEN" or family == "encoder_decoder"]
    domains = sorted({w[0] for w in suite.lexicon})
    labels_by_type = {}
    for task in suite.tasks:
        if task.task_type in types and not task.spec.is_generation:
            labels_by_type.setdefault(task.task_type, set()).add(task.spec.label_tokens)
    all_labels = sorted({tok for sets in labels_by_type.values() for ls in sets for tok in ls})
    corpus = []
    for i in range(records):
        u = rng.random()
        dom = domains[int(rng.integers(len(domains)))]
        t = types[int(rng.integers(len(types)))]
        length = int(rng.choice([7, 8, 9, 10]))
        words = _domain_words(suite.lexicon, dom)
        if u < plain_fraction:
            # planted co-occurrence: every plain record stays within one domain
            body = [str(w) for w in rng.choice(words, size=length)]
            corpus.append(["<s>", *body])
            continue
        if t == "GEN":
            toks, target = _generation_example(rng, suite.lexicon, words, length)
            answer = list(target)
        else:
            verbalizers = sorted(labels_by_type[t])
            labels = verbalizers[int(rng.integers(len(verbalizers)))]
            k = len(labels)
            if k == 3 and length % 2:
                length += 1
            if k == 2 and length % 2 == 0:
                length -= 1
            y = int(rng.integers(k))
            toks = _classification_example(rng, suite.lexicon, words, t, length, y, k)
            flipped = bool(rng.random() < 0.5)
            answer = [labels[k - 1 - y] if flipped else labels[y]]
            foreign = [tok for tok in all_labels if tok not in labels]
            if foreign and rng.random() < distractor_fraction:
                answer = [foreign[int(rng.integers(len(foreign)))]]
        if u < plain_fraction + null_fraction and all_labels:
            corpus.append([all_labels[int(rng.integers(len(all_labels)))], NULL_SLOT, *toks])
        else:
            corpus.append([*answer, cue_token(t, t != "GEN" and flipped), *toks])
    return corpus


# ---------------------------------------------------------------------------
# evaluation


def encode_examples(model, examples: Sequence[Example]) -> np.ndarray:
    ids, _ = model._pad([model.ids(ex.tokens) for ex in examples])
    return ids


def label_ids(model, task: Task) -> np.ndarray:
    return np.array(model.ids(task.label_tokens))


def predict_labels(model, prompt, task: Task, examples: Sequence[Example], batch_size: int = 250) -> np.ndarray:
    """Rank the verbalizer tokens at the decode position; lowest index wins ties."""
    lab = label_ids(model, task)
    preds = []
    with T.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i : i + batch_size]
            logits = model.forward(encode_examples(model, chunk), prompt).logits.data[:, 0, :]
            preds.append(np.argmax(logits[:, lab], axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def score_predictions(preds: Sequence[int], gold: Sequence[int]) -> float:
    preds, gold = np.asarray(preds), np.asarray(gold)
    if len(gold) == 0:
        raise ValueError("cannot score an empty split")
    return float((preds == gold).mean())


def evaluate(model, prompt, task: Task, split: str = "test", examples: Sequence[Example] | None = None) -> float:
    """Accuracy (classification) or exact match (GEN) of ``prompt`` on a split."""
    examples = task.split(split) if examples is None else examples
    if not examples:
        raise ValueError(f"split {split!r} of task {task.name} is empty")
    if prompt is not None:
        p = getattr(prompt, "tensor", prompt)
        if np.shape(getattr(p, "data", p))[-1] != model.spec.hidden_dim:
            raise ShapeError(
                f"prompt dimension {np.shape(getattr(p, 'data', p))[-1]} does not match model hidden_dim {model.spec.hidden_dim}"
            )
    if task.spec.is_generation:
        if model.spec.family != "encoder_decoder":
            raise ValueError("generation tasks need an encoder-decoder model")
        hits = 0
        for i in range(0, len(examples), 250):
            chunk = examples[i : i + 250]
            outs = model.generate(encode_examples(model, chunk), prompt, max_len=GEN_TARGET_LEN + 2)
            hits += sum(model.tokens(o) == list(ex.target) for o, ex in zip(outs, chunk))
        return hits / len(examples)
    preds = predict_labels(model, prompt, task, examples)
    return score_predictions(preds, [ex.target for ex in examples])
