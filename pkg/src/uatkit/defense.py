"""Perplexity-based outlier-word filter and defense-effect evaluation.

Each position's suspicion score is the drop in pseudo-perplexity when that
word is removed; positions scoring above a threshold are dropped in a
single pass. The scoring backend is pluggable: any callable mapping a
token-id sequence to a fluency score works, with the MLM's
pseudo-perplexity as the default.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import MlmModel
from .prompts import PromptSpec, TaskDataset, classify_ids_batch

Scorer = Callable[[Sequence[int]], float]


@dataclass
class FilterConfig:
    threshold: float
    scorer: Scorer | MlmModel

    def __post_init__(self):
        if self.threshold != self.threshold:  # NaN
            raise ValueError("threshold must not be NaN")


def mlm_scorer(model: MlmModel) -> Scorer:
    return model.pseudo_perplexity


def _as_scorer(scorer_or_model) -> Scorer:
    if isinstance(scorer_or_model, MlmModel):
        return scorer_or_model.pseudo_perplexity
    return scorer_or_model


def suspicion_scores(scorer_or_model, tokens: Sequence[int]) -> np.ndarray:
    """score_i = ppl(tokens) - ppl(tokens without position i).

    Larger means removing the word helps fluency more, so the word is more
    suspicious. Needs at least 2 tokens (removing the only token leaves
    nothing to score).
    """
    tokens = list(tokens)
    if len(tokens) < 2:
        raise ValueError("suspicion_scores: need at least 2 tokens")
    if isinstance(scorer_or_model, MlmModel):
        return _mlm_suspicion_scores(scorer_or_model, tokens)
    scorer = _as_scorer(scorer_or_model)
    base = scorer(tokens)
    return np.array([base - scorer(tokens[:i] + tokens[i + 1:])
                     for i in range(len(tokens))])


def _mlm_suspicion_scores(model: MlmModel, tokens: list[int]) -> np.ndarray:
    """Batched fast path: all mask-one-out rows of all variants in one pass."""
    n = len(tokens)
    variants = [tokens] + [tokens[:i] + tokens[i + 1:] for i in range(n)]
    rows, positions, targets, owner = [], [], [], []
    for vi, var in enumerate(variants):
        arr = np.asarray(var, dtype=np.int64)
        live = np.flatnonzero(arr != model.vocab.pad_id)
        if live.size == 0:
            raise ValueError("suspicion_scores: variant with no non-pad tokens")
        for p in live:
            row = arr.copy()
            row[p] = model.vocab.mask_id
            rows.append(row.tolist())
            positions.append(int(p))
            targets.append(int(arr[p]))
            owner.append(vi)
    from .model import pad_rows

    logp = model.masked_logprob_rows(pad_rows(rows, model.vocab.pad_id),
                                     np.array(positions))
    picked = logp[np.arange(len(rows)), targets]
    owner = np.array(owner)
    ppls = np.array([np.exp(-picked[owner == vi].mean())
                     for vi in range(len(variants))])
    return ppls[0] - ppls[1:]


def filter_positions(scorer_or_model, tokens: Sequence[int], config: FilterConfig,
                     protected: Sequence[int] = ()) -> tuple[list[int], list[int]]:
    """Apply the one-pass outlier rule; return (kept tokens, removed indices).

    Scores are computed once on the original sequence. Mask tokens and
    explicitly protected positions are never removed.
    """
    tokens = list(tokens)
    if len(tokens) < 2:
        return tokens, []
    scores = suspicion_scores(scorer_or_model, tokens)
    keep = set(protected)
    kept, removed = [], []
    for i, t in enumerate(tokens):
        if i in keep or t == 0 or scores[i] <= config.threshold:
            kept.append(t)
        else:
            removed.append(i)
    return kept, removed


def filter_sentence(scorer_or_model, tokens: Sequence[int], config: FilterConfig,
                    protected: Sequence[int] = ()) -> list[int]:
    """Drop every position scoring above the threshold, in a single pass."""
    kept, _ = filter_positions(scorer_or_model, tokens, config, protected)
    return kept


def calibrate_threshold(scorer_or_model, clean_sequences: list[Sequence[int]],
                        target_removal: float = 0.05) -> float:
    """Threshold that removes less than ``target_removal`` of clean tokens."""
    scores = []
    for seq in clean_sequences:
        if len(seq) >= 2:
            scores.extend(suspicion_scores(scorer_or_model, seq).tolist())
    if not scores:
        raise ValueError("calibrate_threshold: no scorable clean sequences")
    return float(np.quantile(np.array(scores), 1.0 - target_removal))


@dataclass
class DefenseReport:
    """Attack metrics with and without the filter, plus the filter's cost."""

    asr_before: float
    asr_after: float
    acc_before: float
    acc_after: float
    trigger_removal_rate: float
    threshold: float
    n_eval: int
    asr_increased: bool = False  # observed, not asserted: filters can backfire

    def __post_init__(self):
        for name in ("asr_before", "asr_after", "acc_before", "acc_after",
                     "trigger_removal_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} out of [0,1]: {v}")

    @property
    def delta_asr(self) -> float:
        return self.asr_after - self.asr_before

    @property
    def delta_acc(self) -> float:
        return self.acc_after - self.acc_before

    def to_dict(self) -> dict:
        return {
            "asr_before": self.asr_before, "asr_after": self.asr_after,
            "delta_asr": self.delta_asr,
            "acc_before": self.acc_before, "acc_after": self.acc_after,
            "delta_acc": self.delta_acc,
            "trigger_removal_rate": self.trigger_removal_rate,
            "threshold": self.threshold, "n_eval": self.n_eval,
            "asr_increased": self.asr_increased,
        }


def evaluate_defense(pfm: MlmModel, test, prompt: PromptSpec, trigger,
                     config: FilterConfig) -> DefenseReport:
    """ASR and ACC with and without filtering the untrusted region.

    The untrusted region is the input sentence plus the injected trigger;
    the prompt template is the defender's own and never filtered. With an
    empty trigger the attack side is the identity, so delta-ASR is 0 by
    construction; the clean-accuracy cost of filtering is still measured.
    """
    from .metrics import NoCorrectPredictions, _test_split

    examples = _test_split(test)
    if not examples:
        raise ValueError("evaluate_defense: empty test set")
    trigger = list(trigger)
    vocab = pfm.vocab
    sens = [vocab.encode(t) for t, _ in examples]
    labels = [y for _, y in examples]

    clean_pred, _ = classify_ids_batch(pfm, sens, prompt)
    correct = [i for i, p in enumerate(clean_pred) if p == labels[i]]
    acc_before = len(correct) / len(examples)
    if not correct:
        raise NoCorrectPredictions("no correctly classified examples")

    filtered_clean = [filter_sentence(config.scorer, s, config) for s in sens]
    clean_pred_f, _ = classify_ids_batch(pfm, filtered_clean, prompt)
    acc_after = float(np.mean([p == y for p, y in zip(clean_pred_f, labels)]))

    if not trigger:
        asr_before = asr_after = 0.0
        removal = 0.0
    else:
        atk_pred, _ = classify_ids_batch(pfm, [sens[i] for i in correct],
                                         prompt, trigger)
        asr_before = float(np.mean([p != labels[i] for p, i in zip(atk_pred, correct)]))
        filtered_regions = []
        removed_trigger = 0
        for i in correct:
            region = sens[i] + trigger
            kept, removed = filter_positions(config.scorer, region, config)
            filtered_regions.append(kept)
            removed_trigger += sum(1 for r in removed if r >= len(sens[i]))
        atk_pred_f, _ = classify_ids_batch(pfm, filtered_regions, prompt)
        asr_after = float(np.mean([p != labels[i] for p, i in zip(atk_pred_f, correct)]))
        removal = removed_trigger / (len(trigger) * len(correct))

    return DefenseReport(
        asr_before=asr_before, asr_after=asr_after,
        acc_before=acc_before, acc_after=acc_after,
        trigger_removal_rate=removal, threshold=config.threshold,
        n_eval=len(examples), asr_increased=asr_after > asr_before,
    )
