"""Attack evaluation: clean accuracy, attack success rate over the
correctly-predicted subset, and the angle-based semantic similarity score.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .model import MlmModel
from .prompts import PromptSpec, TaskDataset, classify_batch


class NoCorrectPredictions(RuntimeError):
    """ASR denominator is empty: the model got nothing right to flip."""


def _test_split(test) -> list[tuple[str, str]]:
    if isinstance(test, TaskDataset):
        return list(test.test)
    return list(test)


def accuracy(pfm: MlmModel, test, prompt: PromptSpec) -> float:
    """Fraction of clean examples classified correctly."""
    examples = _test_split(test)
    if not examples:
        raise ValueError("accuracy: empty test set")
    labels, _ = classify_batch(pfm, [t for t, _ in examples], prompt)
    return float(np.mean([p == y for p, (_, y) in zip(labels, examples)]))


def correctly_predicted(pfm: MlmModel, test, prompt: PromptSpec) -> list[tuple[str, str]]:
    """The clean-correct subset D' that ASR is measured over."""
    examples = _test_split(test)
    labels, _ = classify_batch(pfm, [t for t, _ in examples], prompt)
    return [ex for ex, p in zip(examples, labels) if p == ex[1]]


def attack_success_rate(pfm: MlmModel, test, prompt: PromptSpec, trigger) -> float:
    """Fraction of clean-correct examples whose prediction flips under the trigger."""
    subset = correctly_predicted(pfm, test, prompt)
    if not subset:
        raise NoCorrectPredictions("no correctly classified examples")
    trigger = list(trigger)
    if not trigger:
        return 0.0
    labels, _ = classify_batch(pfm, [t for t, _ in subset], prompt, trigger)
    return float(np.mean([p != y for p, (_, y) in zip(labels, subset)]))


def semantic_similarity(model: MlmModel, original: str, perturbed: str) -> float:
    """1 - arccos(cosine) / pi between the two sentence embeddings."""
    ids_a = model.vocab.encode(original)
    ids_b = model.vocab.encode(perturbed)
    if not ids_a or not ids_b:
        raise ValueError("semantic_similarity: empty text")
    return similarity_from_embeddings(model.sentence_embedding(ids_a),
                                      model.sentence_embedding(ids_b))


def similarity_from_embeddings(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("semantic_similarity: zero-norm embedding")
    cos = float(np.dot(u.astype(np.float64), v.astype(np.float64)) / (nu * nv))
    cos = min(1.0, max(-1.0, cos))
    return 1.0 - math.acos(cos) / math.pi


def sss_of_attack(model: MlmModel, test, trigger, prompt: PromptSpec | None = None
                  ) -> tuple[float, float]:
    """Mean and std of similarity between each sentence and sentence+trigger.

    The trigger is appended where the classification layout puts it (after
    the input, before the template); the template itself is not embedded.
    """
    examples = _test_split(test)
    if not examples:
        raise ValueError("sss_of_attack: empty test set")
    trigger = list(trigger)
    scores = []
    for text, _ in examples:
        ids = model.vocab.encode(text)
        scores.append(similarity_from_embeddings(
            model.sentence_embedding(ids),
            model.sentence_embedding(ids + trigger)))
    return float(np.mean(scores)), float(np.std(scores))


@dataclass
class AttackReport:
    """Per-run attack record; serializes into the JSON report."""

    task: str
    prompt_kind: str
    trigger_tokens: list[str]
    trigger_ids: list[int]
    alpha: float
    acc: float
    asr: float
    sss_mean: float
    sss_std: float
    n_eval: int
    seed: int
    adv_loss: float = math.nan
    sem_loss: float = math.nan
    combined_loss: float = math.nan
    per_example: list[dict] | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("acc", "asr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} out of [0,1]: {v}")
        if not 0.0 <= self.sss_mean <= 1.0:
            raise ValueError(f"sss_mean out of [0,1]: {self.sss_mean}")

    def to_dict(self) -> dict:
        out = {
            "task": self.task, "prompt_kind": self.prompt_kind,
            "trigger_tokens": self.trigger_tokens, "trigger_ids": self.trigger_ids,
            "alpha": self.alpha, "acc": self.acc, "asr": self.asr,
            "sss_mean": self.sss_mean, "sss_std": self.sss_std,
            "n_eval": self.n_eval, "seed": self.seed,
            "adv_loss": self.adv_loss, "sem_loss": self.sem_loss,
            "combined_loss": self.combined_loss,
            "config": self.config,
        }
        if self.per_example is not None:
            out["per_example"] = self.per_example
        return out


def build_attack_report(pfm: MlmModel, task: TaskDataset, prompt: PromptSpec,
                        trigger_ids, alpha: float, seed: int,
                        embed_model: MlmModel | None = None,
                        losses: tuple[float, float, float] | None = None,
                        config: dict | None = None) -> AttackReport:
    """Evaluate one trigger end to end and collect the metric suite.

    ``embed_model`` defaults to the PFM itself for the similarity score;
    pass the PLM to measure against the attack-time embedder instead.
    """
    embedder = embed_model or pfm
    trigger_ids = list(trigger_ids)
    acc = accuracy(pfm, task, prompt)
    asr = attack_success_rate(pfm, task, prompt, trigger_ids)
    sss_mean, sss_std = sss_of_attack(embedder, task, trigger_ids, prompt)
    adv, sem, comb = losses if losses else (math.nan, math.nan, math.nan)
    return AttackReport(
        task=task.name, prompt_kind=prompt.kind,
        trigger_tokens=pfm.vocab.tokens(trigger_ids), trigger_ids=trigger_ids,
        alpha=alpha, acc=acc, asr=asr, sss_mean=sss_mean, sss_std=sss_std,
        n_eval=len(task.test), seed=seed,
        adv_loss=adv, sem_loss=sem, combined_loss=comb,
        config=config or {},
    )


def write_plot_csv(path, rows: list[dict]) -> None:
    """Per-run plot data: alpha, trigger length, ASR, SSS and friends."""
    if not rows:
        raise ValueError("write_plot_csv: no rows")
    fields = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
