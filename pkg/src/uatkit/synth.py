"""Synthetic corpus and toy classification tasks.

A small templated world stands in for a real pretraining corpus and for
the downstream datasets: movie-review sentences carrying sentiment, topic
headlines, and animal/machine subject sentences. A fraction of corpus
lines end in a category tag ("... . good", "... . sports news") so that a
masked LM trained on the corpus can fill prompt slots.
"""

from __future__ import annotations

from .seeding import stream
from .vocab import Vocabulary, build_vocab

POSITIVE_ADJ = ("great", "wonderful", "excellent", "superb", "delightful",
                "charming", "brilliant", "lovely")
NEGATIVE_ADJ = ("terrible", "awful", "horrible", "dreadful", "boring",
                "clumsy", "tedious", "bleak")
REVIEW_NOUNS = ("movie", "film", "book", "story", "show", "play", "song", "game")
ADVERBS = ("truly", "really", "quite", "simply")

ANIMALS = ("cat", "dog", "bird", "fox", "rabbit", "horse", "mouse", "owl")
MACHINES = ("robot", "computer", "engine", "printer", "server", "drone")
MACHINE_OBJECTS = ("signals", "files", "images", "numbers")

TOPIC_NOUNS = {
    "sports": ("team", "coach", "match", "player", "season", "stadium"),
    "politics": ("senate", "election", "minister", "policy", "voters", "parliament"),
    "business": ("market", "shares", "profits", "company", "trade", "economy"),
    "technology": ("software", "internet", "network", "devices", "engineers", "data"),
}

# one verb pool for every family: nouns alone carry the class signal, so
# masked-word prediction has to read them rather than key on the verb
SHARED_VERBS = ("watched", "followed", "found", "noticed", "surprised", "pleased")

SENTIMENT_TAGS = {"negative": "bad", "positive": "good"}
SUBJECT_TAGS = {"animal": "animal", "machine": "machine"}


def all_words() -> list[str]:
    words = set(POSITIVE_ADJ + NEGATIVE_ADJ + REVIEW_NOUNS + ADVERBS)
    words |= set(ANIMALS + MACHINES + MACHINE_OBJECTS + SHARED_VERBS)
    for nouns in TOPIC_NOUNS.values():
        words |= set(nouns)
    words |= set(SENTIMENT_TAGS.values()) | set(SUBJECT_TAGS.values())
    words |= set(TOPIC_NOUNS.keys())
    words |= {"the", "was", "it", "news", "review", "and"}
    return sorted(words)


def _sentiment_sentence(rng) -> tuple[str, str]:
    adj_set, label = (POSITIVE_ADJ, "positive") if rng.integers(2) else (NEGATIVE_ADJ, "negative")
    noun = REVIEW_NOUNS[rng.integers(len(REVIEW_NOUNS))]
    adj = adj_set[rng.integers(len(adj_set))]
    if rng.integers(2):
        adv = ADVERBS[rng.integers(len(ADVERBS))]
        return f"the {noun} was {adv} {adj} .", label
    return f"the {noun} was {adj} .", label


def _subject_sentence(rng) -> tuple[str, str]:
    v = SHARED_VERBS[rng.integers(len(SHARED_VERBS))]
    if rng.integers(2):
        a = ANIMALS[rng.integers(len(ANIMALS))]
        b = ANIMALS[rng.integers(len(ANIMALS))]
        return f"the {a} {v} the {b} .", "animal"
    m = MACHINES[rng.integers(len(MACHINES))]
    o = (MACHINES + MACHINE_OBJECTS)[rng.integers(len(MACHINES) + len(MACHINE_OBJECTS))]
    return f"the {m} {v} the {o} .", "machine"


def _topic_sentence(rng) -> tuple[str, str]:
    topics = sorted(TOPIC_NOUNS)
    topic = topics[rng.integers(len(topics))]
    nouns = TOPIC_NOUNS[topic]
    a = nouns[rng.integers(len(nouns))]
    b = nouns[rng.integers(len(nouns))]
    v = SHARED_VERBS[rng.integers(len(SHARED_VERBS))]
    return f"the {a} {v} the {b} .", topic


def toy_corpus(n_lines: int = 1000, seed: int = 0, tagged_fraction: float = 0.7,
               compound_fraction: float = 0.6, fragment_fraction: float = 0.12) -> list[str]:
    """Pretraining corpus: a mixture of the three sentence families.

    ``tagged_fraction`` of the lines carry their category tag as a suffix,
    which is what lets prompt slots be filled later. Of the tagged lines,
    ``compound_fraction`` put a neutral filler between the content and its
    tag, so tag prediction learns to attend across a gap instead of keying
    on adjacency. ``fragment_fraction`` of lines are standalone short
    phrases, giving short prefixes real next-word statistics.
    """
    rng = stream(seed, "toy-corpus")
    makers = (_sentiment_sentence, _subject_sentence, _topic_sentence)
    tags = (
        lambda label: SENTIMENT_TAGS[label],
        lambda label: f"{SUBJECT_TAGS[label]} story",
        lambda label: f"{label} news",
    )
    lines = []
    for _ in range(n_lines):
        r = rng.random()
        kind = int(rng.integers(3))
        sen, label = makers[kind](rng)
        if r < fragment_fraction:
            lines.append(_fragment(rng))
        elif r < fragment_fraction + tagged_fraction:
            if rng.random() < compound_fraction:
                other = int((kind + 1 + rng.integers(2)) % 3)  # a different family
                middle = makers[other](rng)[0] if rng.random() < 0.5 else _gap_fragment(rng)
                lines.append(f"{sen} {middle} {tags[kind](label)}")
            else:
                lines.append(f"{sen} {tags[kind](label)}")
        else:
            lines.append(sen)
    return lines


def _gap_fragment(rng) -> str:
    """A short neutral filler used between content and its tag."""
    nouns = REVIEW_NOUNS + ANIMALS + MACHINES + tuple(
        n for group in TOPIC_NOUNS.values() for n in group)
    pick = rng.integers(3)
    if pick == 0:
        return ADVERBS[rng.integers(len(ADVERBS))]
    if pick == 1:
        return f"the {nouns[rng.integers(len(nouns))]}"
    return f"the {nouns[rng.integers(len(nouns))]} and the {nouns[rng.integers(len(nouns))]}"


def _fragment(rng) -> str:
    """A standalone noun-initial phrase: teaches short-prefix statistics."""
    nouns = REVIEW_NOUNS + ANIMALS + MACHINES + tuple(
        n for group in TOPIC_NOUNS.values() for n in group)
    adjs = POSITIVE_ADJ + NEGATIVE_ADJ
    n1 = nouns[rng.integers(len(nouns))]
    pick = rng.integers(3)
    if pick == 0:
        return f"{n1} was {ADVERBS[rng.integers(len(ADVERBS))]} {adjs[rng.integers(len(adjs))]}"
    if pick == 1:
        return f"{n1} was {adjs[rng.integers(len(adjs))]}"
    return (f"{n1} {SHARED_VERBS[rng.integers(len(SHARED_VERBS))]} the "
            f"{nouns[rng.integers(len(nouns))]}")


def toy_vocab(corpus: list[str] | None = None) -> Vocabulary:
    """Vocabulary covering the full toy inventory plus any corpus extras."""
    base = [" ".join(all_words()) + " ."]
    return build_vocab(base + (corpus or []), max_size=4096)


TASK_NAMES = ("sentiment", "subject", "topic")


def toy_task(name: str, n_train: int = 64, n_test: int = 48, seed: int = 0):
    """A synthetic TaskDataset with disjoint train/test sentences."""
    from .prompts import TaskDataset

    makers = {
        "sentiment": _sentiment_sentence,
        "subject": _subject_sentence,
        "topic": _topic_sentence,
    }
    if name not in makers:
        raise ValueError(f"unknown toy task {name!r}, have {TASK_NAMES}")
    classes = {
        "sentiment": ("negative", "positive"),
        "subject": ("animal", "machine"),
        "topic": tuple(sorted(TOPIC_NOUNS)),
    }[name]
    need = {c: -(-(n_train + n_test) // len(classes)) for c in classes}
    rng = stream(seed, f"toy-task-{name}")
    seen: set[str] = set()
    per_class: dict[str, list[tuple[str, str]]] = {c: [] for c in classes}
    for _ in range(200 * (n_train + n_test)):
        if all(len(per_class[c]) >= need[c] for c in classes):
            break
        sen, label = makers[name](rng)
        if sen not in seen and len(per_class[label]) < need[label]:
            seen.add(sen)
            per_class[label].append((sen, label))
    if not all(len(per_class[c]) >= need[c] for c in classes):
        raise ValueError(f"toy task {name}: could not draw enough distinct sentences")
    # interleave classes, then cut train/test so both splits stay balanced
    pool = [ex for group in zip(*(per_class[c] for c in classes)) for ex in group]
    return TaskDataset(name=name, classes=classes,
                       train=pool[:n_train], test=pool[n_train: n_train + n_test])


def toy_prompt(name: str, kind: str = "null"):
    """The prompt spec matching each toy task's corpus tag pattern."""
    from .prompts import PromptSpec

    templates = {
        ("sentiment", "null"): "{sen} [mask]",
        ("sentiment", "manual"): "{sen} it was [mask] .",
        ("subject", "null"): "{sen} [mask]",
        ("subject", "manual"): "{sen} [mask] story",
        ("topic", "null"): "{sen} [mask]",
        ("topic", "manual"): "{sen} [mask] news",
    }
    verbalizers = {
        "sentiment": {"negative": "bad", "positive": "good"},
        "subject": {"animal": "animal", "machine": "machine"},
        "topic": {t: t for t in sorted(TOPIC_NOUNS)},
    }
    key = (name, kind)
    if key not in templates:
        raise ValueError(f"no toy prompt for task {name!r} kind {kind!r}")
    return PromptSpec(kind=kind, template=templates[key], verbalizer=verbalizers[name])


def distinct_sentence_count(name: str) -> int:
    """Upper bound on distinct sentences per family (sanity for samplers)."""
    if name == "sentiment":
        return len(REVIEW_NOUNS) * len(POSITIVE_ADJ + NEGATIVE_ADJ) * (1 + len(ADVERBS))
    if name == "subject":
        return (len(ANIMALS) ** 2 * len(ANIMAL_VERBS)
                + len(MACHINES) * len(MACHINE_VERBS) * len(MACHINE_OBJECTS))
    if name == "topic":
        return sum(len(n) ** 2 for n in TOPIC_NOUNS.values()) * len(TOPIC_VERBS)
    raise ValueError(name)
