"""Prompt templates, verbalizers, and prompt-based fine-tuning.

A prompt turns classification into mask filling: the template wraps the
input sentence, and the verbalizer maps each class label to one
vocabulary token read off the mask-position distribution.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import assemble_phase2
from .model import MlmModel, TrainConfig, TrainingDiverged, pad_rows
from .optim import AdamW
from .seeding import stream
from .vocab import Vocabulary, tokenize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PromptSpec:
    """Template with a "{sen}" slot and a "[mask]" slot, plus a verbalizer.

    ``verbalizer`` maps class label -> single vocabulary token; its key
    order fixes the class order used for tie-breaking.
    """

    kind: str  # "null" | "manual"
    template: str
    verbalizer: dict[str, str]

    def __post_init__(self):
        if self.kind not in ("null", "manual"):
            raise ValueError(f"prompt kind must be null or manual, got {self.kind!r}")
        if self.template.count("{sen}") != 1:
            raise ValueError("template needs exactly one {sen} slot")
        if len(set(self.verbalizer.values())) != len(self.verbalizer):
            raise ValueError("verbalizer must be injective")

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(self.verbalizer)

    def compile(self, vocab: Vocabulary) -> "CompiledPrompt":
        before, after = self.template.split("{sen}")
        prefix = [vocab.id_of(t) for t in tokenize(before)]
        suffix = [vocab.id_of(t) for t in tokenize(after)]
        n_masks = prefix.count(vocab.mask_id) + suffix.count(vocab.mask_id)
        if n_masks != 1:
            raise ValueError(f"template needs exactly one [mask] slot, found {n_masks}")
        verb_ids = []
        for label, tok in self.verbalizer.items():
            toks = tokenize(tok)
            if len(toks) != 1:
                raise ValueError(f"verbalizer for {label!r} must be a single token, got {tok!r}")
            tid = vocab.token_to_id.get(toks[0])
            if tid is None:
                raise ValueError(f"verbalizer token {tok!r} for {label!r} is out of vocabulary")
            verb_ids.append(tid)
        return CompiledPrompt(spec=self, prefix_ids=tuple(prefix), suffix_ids=tuple(suffix),
                              mask_in_prefix=vocab.mask_id in prefix,
                              verbalizer_ids=tuple(verb_ids))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "template": self.template, "verbalizer": dict(self.verbalizer)}

    @classmethod
    def from_dict(cls, obj: dict) -> "PromptSpec":
        return cls(kind=obj["kind"], template=obj["template"], verbalizer=dict(obj["verbalizer"]))


@dataclass(frozen=True)
class CompiledPrompt:
    """A PromptSpec bound to a vocabulary."""

    spec: PromptSpec
    prefix_ids: tuple[int, ...]
    suffix_ids: tuple[int, ...]
    mask_in_prefix: bool
    verbalizer_ids: tuple[int, ...]

    @property
    def classes(self) -> tuple[str, ...]:
        return self.spec.classes


@dataclass
class TaskDataset:
    """Labeled (text, class) examples with train/test split tags."""

    name: str
    classes: tuple[str, ...]
    train: list[tuple[str, str]]
    test: list[tuple[str, str]]

    def __post_init__(self):
        for split in (self.train, self.test):
            for _, label in split:
                if label not in self.classes:
                    raise ValueError(f"label {label!r} not in class list {self.classes}")


def load_task(train_path, test_path, name: str = "task",
              classes: tuple[str, ...] | None = None) -> TaskDataset:
    """Read JSON-lines files with {"text": ..., "label": ...} objects."""

    def read(path):
        out = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    out.append((obj["text"], obj["label"]))
        return out

    train, test = read(train_path), read(test_path)
    if classes is None:
        classes = tuple(sorted({lab for _, lab in train + test}))
    return TaskDataset(name=name, classes=classes, train=train, test=test)


def save_task_split(examples: list[tuple[str, str]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for text, label in examples:
            fh.write(json.dumps({"text": text, "label": label}, sort_keys=True) + "\n")


def sample_shots(task: TaskDataset, shots: int, seed: int) -> list[tuple[str, str]]:
    """Draw ``shots`` training examples per class, seeded."""
    rng = stream(seed, f"shots-{task.name}")
    picked = []
    for cls in task.classes:
        members = [ex for ex in task.train if ex[1] == cls]
        if len(members) < shots:
            raise ValueError(
                f"class {cls!r} has only {len(members)} train examples, need {shots}"
            )
        idx = rng.choice(len(members), size=shots, replace=False)
        picked.extend(members[int(i)] for i in sorted(idx))
    return picked


def finetune(base: MlmModel, task: TaskDataset, prompt: PromptSpec,
             shots: int = 16, train: TrainConfig | None = None) -> MlmModel:
    """Fine-tune a copy of ``base`` to predict verbalizer tokens at the mask.

    All weights update. The returned model is the PFM; ``base`` is left
    untouched.
    """
    train = train or TrainConfig(epochs=10)
    compiled = prompt.compile(base.vocab)
    label_to_vid = dict(zip(prompt.classes, compiled.verbalizer_ids))
    examples = sample_shots(task, shots, train.seed)

    rows, positions, targets = [], [], []
    for text, label in examples:
        assembled = assemble_phase2(base.vocab.encode(text), [], compiled,
                                    max_len=base.config.max_seq_len)
        rows.append(list(assembled.tokens))
        positions.append(assembled.mask_pos)
        targets.append(label_to_vid[label])

    model = base.clone()
    opt = AdamW(model.params, lr=train.lr, weight_decay=train.weight_decay)
    rng = stream(train.seed, "finetune")
    epoch_losses = []
    for epoch in range(train.epochs):
        order = rng.permutation(len(rows))
        losses = []
        for lo in range(0, len(order), train.batch_size):
            sel = order[lo: lo + train.batch_size]
            ids = pad_rows([rows[i] for i in sel], model.vocab.pad_id)
            logits, _ = model.forward_logits(ids)
            flat = ad.reshape(logits, (ids.shape[0] * ids.shape[1], model.config.vocab_size))
            flat_idx = np.array([j * ids.shape[1] + positions[i] for j, i in enumerate(sel)])
            loss = ad.cross_entropy(ad.take_rows(flat, flat_idx),
                                    np.array([targets[i] for i in sel]))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"finetune loss is {value} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
        epoch_losses.append(float(np.mean(losses)))
        logger.info("finetune epoch %d: loss %.4f", epoch, epoch_losses[-1])
    model.train_log = {"kind": "finetune", "task": task.name, "shots": shots,
                       "prompt": prompt.to_dict(), "epoch_losses": epoch_losses,
                       "base": base.train_log.get("kind", "unknown"),
                       "lr": train.lr, "weight_decay": train.weight_decay,
                       "epochs": train.epochs, "seed": train.seed}
    return model


def classify_ids_batch(pfm: MlmModel, sentences: list[list[int]], prompt: PromptSpec,
                       trigger: list[int] | None = None
                       ) -> tuple[list[str], np.ndarray]:
    """Classify pre-tokenized sentences in one padded forward pass.

    Returns (predicted labels, renormalized class probabilities of shape
    (N, n_classes) in verbalizer order). Ties break to the lowest class
    index.
    """
    compiled = prompt.compile(pfm.vocab)
    trigger = list(trigger or [])
    rows, positions = [], []
    for sen in sentences:
        assembled = assemble_phase2(sen, trigger, compiled,
                                    max_len=pfm.config.max_seq_len)
        rows.append(list(assembled.tokens))
        positions.append(assembled.mask_pos)
    logprobs = pfm.masked_logprob_rows(pad_rows(rows, pfm.vocab.pad_id),
                                       np.array(positions))
    sel = logprobs[:, list(compiled.verbalizer_ids)]
    sel = sel - sel.max(axis=1, keepdims=True)
    probs = np.exp(sel)
    probs /= probs.sum(axis=1, keepdims=True)
    labels = [prompt.classes[i] for i in probs.argmax(axis=1)]
    return labels, probs


def classify_batch(pfm: MlmModel, texts: list[str], prompt: PromptSpec,
                   trigger: list[int] | None = None
                   ) -> tuple[list[str], np.ndarray]:
    """Classify many input texts; see ``classify_ids_batch``."""
    return classify_ids_batch(pfm, [pfm.vocab.encode(t) for t in texts],
                              prompt, trigger)


def classify(pfm: MlmModel, text: str, prompt: PromptSpec,
             trigger: list[int] | None = None) -> tuple[str, np.ndarray]:
    """Single-input convenience wrapper over ``classify_batch``."""
    labels, probs = classify_batch(pfm, [text], prompt, trigger)
    return labels[0], probs[0]
