"""Masked-example datasets and model-input assembly.

Phase 1 inputs inject the trigger immediately before the mask of a
masked-word example; Phase 2 inputs place it between the input sentence
and the prompt template. Over-long inputs are truncated from the left,
never touching the trigger or the template.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

from .seeding import stream
from .vocab import FUNCTION_WORDS, Vocabulary

if TYPE_CHECKING:
    from .prompts import CompiledPrompt

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskedExample:
    """A token sequence with exactly one masked position and its answer."""

    tokens: tuple[int, ...]
    mask_pos: int
    label: int
    source_line: int = -1

    def __post_init__(self):
        if self.tokens.count(0) != 1 or self.tokens[self.mask_pos] != 0:
            raise ValueError("MaskedExample needs exactly one mask, at mask_pos")
        if self.label in (0, 1):
            raise ValueError("label may not be the mask or pad id")


@dataclass(frozen=True)
class AssembledInput:
    """A model-ready sequence with the trigger span located."""

    tokens: tuple[int, ...]
    mask_pos: int
    trigger_span: tuple[int, int]
    origin: str  # "phase-1" | "phase-2"

    def __post_init__(self):
        lo, hi = self.trigger_span
        if not (0 <= lo <= hi <= len(self.tokens)):
            raise ValueError(f"trigger span {self.trigger_span} out of bounds")
        if lo <= self.mask_pos < hi:
            raise ValueError("trigger span overlaps the mask position")
        if self.tokens.count(0) != 1 or self.tokens[self.mask_pos] != 0:
            raise ValueError("assembled input needs exactly one mask, at mask_pos")


def make_masked_dataset(corpus_lines: Sequence[str], n_examples: int, seed: int,
                        vocab: Vocabulary, content_only: bool = False
                        ) -> list[MaskedExample]:
    """Mask one uniformly chosen in-vocab, non-special token per example.

    Lines are drawn uniformly with replacement from those with at least one
    maskable token. ``content_only`` restricts masking to content words:
    alphanumeric tokens outside the small closed function-word list.
    """

    def maskable(t: int) -> bool:
        if t < 4:
            return False
        if not content_only:
            return True
        tok = vocab.id_to_token[t]
        return tok not in FUNCTION_WORDS and any(c.isalnum() for c in tok)

    usable: list[tuple[int, list[int], list[int]]] = []
    skipped = 0
    for li, line in enumerate(corpus_lines):
        ids = vocab.encode(line)
        positions = [i for i, t in enumerate(ids) if maskable(t)]
        if positions:
            usable.append((li, ids, positions))
        else:
            skipped += 1
    if not usable:
        raise ValueError("make_masked_dataset: no line has a maskable token")
    if skipped:
        logger.info("make_masked_dataset: skipped %d lines without maskable tokens", skipped)

    rng = stream(seed, "masked-dataset")
    out = []
    for _ in range(n_examples):
        li, ids, positions = usable[rng.integers(len(usable))]
        pos = int(positions[rng.integers(len(positions))])
        tokens = list(ids)
        label = tokens[pos]
        tokens[pos] = vocab.mask_id
        out.append(MaskedExample(tokens=tuple(tokens), mask_pos=pos,
                                 label=label, source_line=li))
    return out


def assemble_phase1(example: MaskedExample, trigger: Sequence[int],
                    max_len: int = 64) -> AssembledInput:
    """Inject the trigger immediately before the example's mask."""
    trigger = list(trigger)
    prefix = list(example.tokens[: example.mask_pos])
    suffix = list(example.tokens[example.mask_pos + 1:])
    overflow = len(prefix) + len(trigger) + 1 + len(suffix) - max_len
    if overflow > 0:
        drop = min(overflow, len(prefix))
        prefix = prefix[drop:]
        overflow -= drop
    if overflow > 0:
        suffix = suffix[: max(0, len(suffix) - overflow)]
    tokens = prefix + trigger + [0] + suffix
    mask_pos = len(prefix) + len(trigger)
    return AssembledInput(tokens=tuple(tokens), mask_pos=mask_pos,
                          trigger_span=(len(prefix), mask_pos), origin="phase-1")


def assemble_phase2(input_ids: Sequence[int], trigger: Sequence[int],
                    prompt: "CompiledPrompt", max_len: int = 64) -> AssembledInput:
    """Lay out input + trigger + prompt template (with its mask slot)."""
    trigger = list(trigger)
    sen = list(input_ids)
    fixed = len(prompt.prefix_ids) + len(trigger) + len(prompt.suffix_ids)
    if fixed > max_len:
        raise ValueError(
            f"template plus trigger ({fixed} tokens) exceeds max length {max_len}"
        )
    sen = sen[max(0, len(sen) + fixed - max_len):]
    tokens = list(prompt.prefix_ids) + sen + trigger + list(prompt.suffix_ids)
    lo = len(prompt.prefix_ids) + len(sen)
    if prompt.mask_in_prefix:
        mask_pos = prompt.prefix_ids.index(0)
    else:
        mask_pos = lo + len(trigger) + prompt.suffix_ids.index(0)
    return AssembledInput(tokens=tuple(tokens), mask_pos=mask_pos,
                          trigger_span=(lo, lo + len(trigger)), origin="phase-2")


def export_masked_dataset(examples: Iterable[MaskedExample], vocab: Vocabulary,
                          path) -> None:
    """One JSON object per line: string tokens, mask position, label string."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({
                "text_tokens": vocab.tokens(ex.tokens),
                "mask_pos": ex.mask_pos,
                "label": vocab.id_to_token[ex.label],
                "source_line": ex.source_line,
            }, sort_keys=True) + "\n")


def load_masked_dataset(path, vocab: Vocabulary) -> list[MaskedExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            out.append(MaskedExample(
                tokens=tuple(vocab.id_of(t) for t in obj["text_tokens"]),
                mask_pos=obj["mask_pos"],
                label=vocab.id_of(obj["label"]),
                source_line=obj.get("source_line", -1),
            ))
    return out
