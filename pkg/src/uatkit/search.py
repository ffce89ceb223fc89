"""Trigger search: joint adversarial+semantic loss, first-order candidate
scoring, and per-position beam search.

The adversarial term is the negated mean cross-entropy of the masked word
over a batch of phase-1 inputs (lower = model more wrong). The semantic
term is the negated mean probability of each trigger token given its
predecessors (lower = more natural). Candidates per position come from a
first-order Taylor estimate of the loss change under an embedding swap;
survivors are re-ranked by true loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import MaskedExample, assemble_phase1
from .model import MlmModel, pad_rows
from .seeding import stream
from .vocab import Vocabulary

DEFAULT_ALPHA_GRID = (0.0, 0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0)
DEFAULT_TRIGGER_LENGTHS = (3, 5, 7)

SEM_MODES = ("left", "full")


@dataclass
class SearchConfig:
    trigger_length: int = 3
    steps: int = 8
    batch_size: int = 16
    alpha: float = 0.05
    candidate_size: int = 10
    beam_size: int = 5
    seed: int = 0
    sem_context_mode: str = "left"
    frozen_batch: bool = False

    def __post_init__(self):
        if min(self.trigger_length, self.steps, self.batch_size,
               self.candidate_size, self.beam_size) < 1:
            raise ValueError("trigger_length, steps, batch_size, candidate_size "
                             "and beam_size must all be >= 1")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.sem_context_mode not in SEM_MODES:
            raise ValueError(f"sem_context_mode must be one of {SEM_MODES}")

    def to_dict(self) -> dict:
        return {
            "trigger_length": self.trigger_length, "steps": self.steps,
            "batch_size": self.batch_size, "alpha": self.alpha,
            "candidate_size": self.candidate_size, "beam_size": self.beam_size,
            "seed": self.seed, "sem_context_mode": self.sem_context_mode,
            "frozen_batch": self.frozen_batch,
        }


@dataclass(frozen=True)
class Trigger:
    """A fixed-length trigger and its last evaluated loss decomposition."""

    token_ids: tuple[int, ...]
    loss: float = math.nan
    adv_loss: float = math.nan
    sem_loss: float = math.nan
    history: tuple[float, ...] = field(default=(), compare=False)


# -- batch preparation -------------------------------------------------------


@dataclass
class _PreparedBatch:
    """Phase-1 rows for one sampled batch, with the trigger columns located."""

    rows: np.ndarray        # (M, T) padded ids with placeholder trigger
    span_starts: np.ndarray  # (M,)
    mask_cols: np.ndarray    # (M,)
    targets: np.ndarray      # (M,) masked-word labels
    length: int              # trigger length L


def _prepare_batch(model: MlmModel, batch: list[MaskedExample], length: int) -> _PreparedBatch:
    if not batch:
        raise ValueError("adv loss needs a non-empty batch")
    placeholder = [4] * length  # any non-special id; overwritten before use
    assembled = [assemble_phase1(ex, placeholder, max_len=model.config.max_seq_len)
                 for ex in batch]
    rows = pad_rows([list(a.tokens) for a in assembled], model.vocab.pad_id)
    return _PreparedBatch(
        rows=rows,
        span_starts=np.array([a.trigger_span[0] for a in assembled]),
        mask_cols=np.array([a.mask_pos for a in assembled]),
        targets=np.array([ex.label for ex in batch]),
        length=length,
    )


def _with_trigger(prep: _PreparedBatch, trigger: tuple[int, ...]) -> np.ndarray:
    rows = prep.rows.copy()
    for j, tok in enumerate(trigger):
        rows[np.arange(len(rows)), prep.span_starts + j] = tok
    return rows


def _sem_rows(trigger: tuple[int, ...], mask_id: int, mode: str
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[dict[int, int]]]:
    """Conditional-probability rows for positions i = 2..L (1-based).

    Returns (rows, mask positions, targets, occurrence maps) where the
    occurrence map of each row sends trigger position -> column, for
    gradient collection.
    """
    length = len(trigger)
    rows, positions, targets, occs = [], [], [], []
    for i in range(1, length):  # 0-based target position
        if mode == "left":
            row = list(trigger[:i]) + [mask_id]
            occ = {k: k for k in range(i)}
            pos = i
        else:
            row = list(trigger)
            row[i] = mask_id
            occ = {k: k for k in range(length) if k != i}
            pos = i
        rows.append(row)
        positions.append(pos)
        targets.append(trigger[i])
        occs.append(occ)
    return (pad_rows(rows, 1), np.array(positions), np.array(targets), occs)


# -- public loss surface ------------------------------------------------------


def adv_loss(model: MlmModel, batch: list[MaskedExample], trigger) -> float:
    """Negated mean cross-entropy of the masked word under the trigger (<= 0)."""
    trigger = tuple(trigger)
    prep = _prepare_batch(model, batch, len(trigger))
    return _adv_of_rows(model, _with_trigger(prep, trigger), prep)


def _adv_of_rows(model: MlmModel, rows: np.ndarray, prep: _PreparedBatch) -> float:
    logprobs = model.masked_logprob_rows(rows, prep.mask_cols)
    picked = logprobs[np.arange(len(rows)), prep.targets]
    return float(picked.mean())


def sem_loss(model: MlmModel, trigger, mode: str = "left") -> float:
    """Negated mean conditional probability of trigger tokens, in [-1, 0].

    Defined as 0 for length-1 triggers (no predecessor to condition on).
    """
    trigger = tuple(trigger)
    if mode not in SEM_MODES:
        raise ValueError(f"mode must be one of {SEM_MODES}")
    if len(trigger) < 2:
        return 0.0
    rows, positions, targets, _ = _sem_rows(trigger, model.vocab.mask_id, mode)
    logprobs = model.masked_logprob_rows(rows, positions)
    probs = np.exp(logprobs[np.arange(len(rows)), targets])
    return float(-probs.mean())


def combined_loss(adv: float, sem: float, alpha: float) -> float:
    return adv + alpha * sem


def omega_scores(model: MlmModel, current_token: int, grad_k: np.ndarray) -> np.ndarray:
    """First-order swap scores for every vocabulary word at one position.

    omega_w = -<grad, e_w - e_current>; higher means the swap is predicted
    to lower the loss more. The incumbent scores exactly 0; special tokens
    score -inf so they are never candidates.
    """
    table = model.params["emb.tok"].data.astype(np.float64)
    proj = table @ grad_k.astype(np.float64)
    scores = proj[current_token] - proj
    scores[:4] = -np.inf
    return scores


def hotflip_scores(model: MlmModel, batch: list[MaskedExample], trigger,
                   position: int, alpha: float = 0.0, mode: str = "left") -> np.ndarray:
    """omega over the vocabulary for replacing ``trigger[position]``.

    The gradient is taken on the full combined loss at the given alpha.
    """
    trigger = tuple(trigger)
    if not 0 <= position < len(trigger):
        raise IndexError(f"position {position} out of range for length {len(trigger)}")
    prep = _prepare_batch(model, batch, len(trigger))
    _, _, _, grads = _loss_and_grads(model, prep, trigger, alpha, mode)
    return omega_scores(model, trigger[position], grads[position])


# -- gradient of the combined loss -------------------------------------------


def _loss_and_grads(model: MlmModel, prep: _PreparedBatch, trigger: tuple[int, ...],
                    alpha: float, mode: str
                    ) -> tuple[float, float, float, np.ndarray]:
    """(adv, sem, combined, d combined / d trigger-position embeddings)."""
    length = len(trigger)
    rows = _with_trigger(prep, trigger)
    m, t = rows.shape
    logits, tok_adv = model.forward_logits(rows)
    flat = ad.reshape(logits, (m * t, model.config.vocab_size))
    flat_idx = np.arange(m) * t + prep.mask_cols
    adv_t = ad.cross_entropy(ad.take_rows(flat, flat_idx), prep.targets) * -1.0

    sem_value = 0.0
    tok_sem = None
    occs: list[dict[int, int]] = []
    total = adv_t
    if alpha > 0.0 and length >= 2:
        srows, spos, stargets, occs = _sem_rows(trigger, model.vocab.mask_id, mode)
        slogits, tok_sem = model.forward_logits(srows)
        r, st = srows.shape
        sflat = ad.reshape(slogits, (r * st, model.config.vocab_size))
        sel = ad.take_rows(sflat, np.arange(r) * st + spos)
        sem_t = ad.mean(ad.pick(ad.softmax(sel), stargets)) * -1.0
        sem_value = sem_t.item()
        total = adv_t + sem_t * alpha

    total.backward()
    grads = np.zeros((length, model.config.d_model), dtype=np.float64)
    g_adv = tok_adv.grad
    for k in range(length):
        grads[k] += g_adv[np.arange(m), prep.span_starts + k, :].sum(axis=0)
    if tok_sem is not None:
        g_sem = tok_sem.grad
        for row, occ in enumerate(occs):
            for k, col in occ.items():
                grads[k] += g_sem[row, col, :]
    adv_value = adv_t.item()
    return adv_value, sem_value, combined_loss(adv_value, sem_value, alpha), grads


def _eval_triggers(model: MlmModel, prep: _PreparedBatch,
                   triggers: list[tuple[int, ...]], alpha: float, mode: str
                   ) -> list[tuple[float, float, float]]:
    """True (adv, sem, combined) for many triggers, batched per component."""
    if not triggers:
        return []
    m = len(prep.rows)
    stacked = np.concatenate([_with_trigger(prep, tr) for tr in triggers], axis=0)
    mask_cols = np.tile(prep.mask_cols, len(triggers))
    targets = np.tile(prep.targets, len(triggers))
    logprobs = model.masked_logprob_rows(stacked, mask_cols)
    picked = logprobs[np.arange(len(stacked)), targets]
    advs = picked.reshape(len(triggers), m).mean(axis=1)

    sems = np.zeros(len(triggers))
    if alpha > 0.0 and prep.length >= 2:
        all_rows, all_pos, all_tgt = [], [], []
        for tr in triggers:
            rows, pos, tgt, _ = _sem_rows(tr, model.vocab.mask_id, mode)
            all_rows.append(rows)
            all_pos.append(pos)
            all_tgt.append(tgt)
        width = max(r.shape[1] for r in all_rows)
        padded = np.full((sum(len(r) for r in all_rows), width), model.vocab.pad_id,
                         dtype=np.int64)
        at = 0
        for rows in all_rows:
            padded[at: at + len(rows), : rows.shape[1]] = rows
            at += len(rows)
        pos = np.concatenate(all_pos)
        tgt = np.concatenate(all_tgt)
        logp = model.masked_logprob_rows(padded, pos)
        probs = np.exp(logp[np.arange(len(padded)), tgt])
        sems = -probs.reshape(len(triggers), prep.length - 1).mean(axis=1)

    return [(float(a), float(s), combined_loss(float(a), float(s), alpha))
            for a, s in zip(advs, sems)]


# -- search proper ------------------------------------------------------------


def random_trigger(vocab: Vocabulary, length: int, seed: int) -> Trigger:
    """Uniform draw over non-special tokens; deterministic under seed."""
    rng = stream(seed, "random-trigger")
    content = vocab.content_ids()
    if not content:
        raise ValueError("vocabulary has no non-special tokens")
    ids = tuple(int(content[i]) for i in rng.integers(len(content), size=length))
    return Trigger(token_ids=ids)


def evaluate_trigger(model: MlmModel, batch: list[MaskedExample], token_ids,
                     alpha: float, mode: str = "left") -> Trigger:
    """Attach true loss values to a trigger (used for reports and baselines)."""
    token_ids = tuple(token_ids)
    prep = _prepare_batch(model, batch, len(token_ids))
    adv, sem, _ = _eval_triggers(model, prep, [token_ids], alpha=1.0, mode=mode)[0]
    return Trigger(token_ids=token_ids, adv_loss=adv, sem_loss=sem,
                   loss=combined_loss(adv, sem, alpha))


def beam_search(model: MlmModel, dataset: list[MaskedExample],
                config: SearchConfig) -> list[Trigger]:
    beam, _ = beam_search_with_trace(model, dataset, config)
    return beam


def beam_search_with_trace(model: MlmModel, dataset: list[MaskedExample],
                           config: SearchConfig) -> tuple[list[Trigger], dict]:
    """Per-position beam search over trigger token replacements.

    Each step samples a batch, then for every position k and beam member:
    score all vocabulary swaps at k by the first-order estimate, evaluate
    the true combined loss of the top candidates, and keep the best
    ``beam_size`` triggers (incumbents stay in the pool, so with a frozen
    batch the best loss never increases). Returns the final beam sorted
    ascending by loss plus a trace dict.
    """
    cfg = config
    if cfg.batch_size > len(dataset):
        raise ValueError(
            f"batch_size {cfg.batch_size} exceeds dataset size {len(dataset)}"
        )
    vocab = model.vocab
    content = vocab.content_ids()
    rng_init = stream(cfg.seed, "trigger-init")
    rng_batch = stream(cfg.seed, "search-batches")

    init = tuple(int(content[i])
                 for i in rng_init.integers(len(content), size=cfg.trigger_length))
    beam: list[tuple[tuple[int, ...], tuple[float, float, float]]] = [(init, (0.0, 0.0, math.inf))]

    step_trace: list[float] = []
    position_trace: list[dict] = []
    batch: list[MaskedExample] = []
    prep = None
    for step in range(cfg.steps):
        if step == 0 or not cfg.frozen_batch:
            idx = rng_batch.choice(len(dataset), size=cfg.batch_size, replace=False)
            batch = [dataset[int(i)] for i in idx]
            prep = _prepare_batch(model, batch, cfg.trigger_length)
        for k in range(cfg.trigger_length):
            pool: dict[tuple[int, ...], tuple[float, float, float]] = {}
            candidates: list[tuple[int, ...]] = []
            for member, _ in beam:
                adv, sem, comb, grads = _loss_and_grads(model, prep, member,
                                                        cfg.alpha, cfg.sem_context_mode)
                pool[member] = (adv, sem, comb)
                omega = omega_scores(model, member[k], grads[k])
                order = np.lexsort((np.arange(len(omega)), -omega))
                picked = 0
                for w in order:
                    if picked >= cfg.candidate_size:
                        break
                    if not np.isfinite(omega[w]):
                        break
                    cand = member[:k] + (int(w),) + member[k + 1:]
                    picked += 1
                    if cand not in pool and cand not in candidates:
                        candidates.append(cand)
            for cand, scores in zip(candidates,
                                    _eval_triggers(model, prep, candidates,
                                                   cfg.alpha, cfg.sem_context_mode)):
                pool[cand] = scores
            ranked = sorted(pool.items(), key=lambda kv: (kv[1][2], kv[0]))
            beam = ranked[: cfg.beam_size]
            position_trace.append({"step": step, "position": k,
                                   "best_loss": beam[0][1][2]})
        step_trace.append(beam[0][1][2])

    history = tuple(step_trace)
    final = []
    for tokens, (adv, sem, comb) in beam:
        if cfg.alpha == 0.0:
            sem = sem_loss(model, tokens, cfg.sem_context_mode)
        final.append(Trigger(token_ids=tokens, loss=comb, adv_loss=adv,
                             sem_loss=sem, history=history))
    trace = {"step_best_loss": step_trace, "position_trace": position_trace,
             "initial_trigger": list(init)}
    return final, trace
