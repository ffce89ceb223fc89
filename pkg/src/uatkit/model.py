"""Small transformer-encoder masked language model.

Provides mask-position token distributions, input-embedding gradients,
left-context conditional probabilities, mean-pooled sentence embeddings
and mask-one-out pseudo-perplexity. The output projection is tied to the
token embedding table.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import AdamW
from .seeding import child_seed, stream
from .vocab import Vocabulary

logger = logging.getLogger(__name__)

ATTN_NEG = -1e9  # additive score for masked-out (pad) keys


class TrainingDiverged(RuntimeError):
    """Raised when the training loss turns non-finite."""


@dataclass
class MlmConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 64
    layernorm_epsilon: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.vocab_size < 5:
            raise ValueError("vocab_size must cover the 4 specials plus content")
        if self.n_layers < 0 or self.max_seq_len < 2:
            raise ValueError("bad architecture sizes")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_seq_len": self.max_seq_len,
            "layernorm_epsilon": self.layernorm_epsilon,
            "seed": self.seed,
        }


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    epochs: int = 30
    batch_size: int = 16
    mask_prob: float = 0.15
    seed: int = 0


def pad_rows(rows: list[list[int]], pad_id: int) -> np.ndarray:
    """Right-pad variable-length id lists into an (R, T) int array."""
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


class MlmModel:
    """Transformer encoder with tied input/output embeddings.

    A trained model is immutable for inference purposes and safe for
    concurrent read-only use; training and fine-tuning are single-writer.
    """

    def __init__(self, config: MlmConfig, vocab: Vocabulary, dtype=np.float32,
                 params: dict[str, Tensor] | None = None):
        if len(vocab) != config.vocab_size:
            raise ValueError(
                f"vocabulary size {len(vocab)} != config.vocab_size {config.vocab_size}"
            )
        self.config = config
        self.vocab = vocab
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else self._init_params()
        self.train_log: dict = {}

    # -- construction ------------------------------------------------------

    def _init_params(self) -> dict[str, Tensor]:
        cfg = self.config
        rng = np.random.default_rng(child_seed(cfg.seed, "mlm-init"))
        d, ff, v = cfg.d_model, cfg.d_ff, cfg.vocab_size

        def w(shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape).astype(self.dtype),
                          requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)

        def ones(shape):
            return Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)

        p: dict[str, Tensor] = {}
        p["emb.tok"] = w((v, d))
        p["emb.pos"] = w((cfg.max_seq_len, d))
        for i in range(cfg.n_layers):
            pre = f"layer{i}"
            p[f"{pre}.ln1.gamma"] = ones((d,))
            p[f"{pre}.ln1.beta"] = zeros((d,))
            for name in ("wq", "wk", "wv", "wo"):
                p[f"{pre}.attn.{name}"] = w((d, d))
            for name in ("bq", "bk", "bv", "bo"):
                p[f"{pre}.attn.{name}"] = zeros((d,))
            p[f"{pre}.ln2.gamma"] = ones((d,))
            p[f"{pre}.ln2.beta"] = zeros((d,))
            p[f"{pre}.ffn.w1"] = w((d, ff))
            p[f"{pre}.ffn.b1"] = zeros((ff,))
            p[f"{pre}.ffn.w2"] = w((ff, d))
            p[f"{pre}.ffn.b2"] = zeros((d,))
        p["final_ln.gamma"] = ones((d,))
        p["final_ln.beta"] = zeros((d,))
        p["out_bias"] = zeros((v,))
        return p

    def clone(self) -> "MlmModel":
        params = {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.params.items()}
        m = MlmModel(self.config, self.vocab, dtype=self.dtype, params=params)
        m.train_log = dict(self.train_log)
        return m

    def astype(self, dtype) -> "MlmModel":
        params = {k: Tensor(t.data.astype(dtype), requires_grad=True)
                  for k, t in self.params.items()}
        return MlmModel(self.config, self.vocab, dtype=dtype, params=params)

    # -- forward -----------------------------------------------------------

    def forward_hidden(self, ids: np.ndarray, embed_delta: np.ndarray | None = None
                       ) -> tuple[Tensor, Tensor]:
        """Run the encoder on an (B, T) id batch.

        Returns (final hidden states (B,T,d), token-embedding lookup node).
        Pad positions are excluded from attention. ``embed_delta`` is an
        optional additive offset on the token embeddings, used by the
        finite-difference oracles.
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ad.ShapeError(f"forward: ids must be (B, T), got {ids.shape}")
        cfg = self.config
        b, t = ids.shape
        if t > cfg.max_seq_len:
            raise ad.ShapeError(
                f"forward: sequence length {t} exceeds max_seq_len {cfg.max_seq_len}"
            )
        p = self.params
        eps = cfg.layernorm_epsilon
        n_heads, d = cfg.n_heads, cfg.d_model
        dh = d // n_heads

        tok = ad.embedding(p["emb.tok"], ids)
        x = tok + ad.embedding(p["emb.pos"], np.arange(t))
        if embed_delta is not None:
            x = x + Tensor(np.asarray(embed_delta, dtype=self.dtype))

        pad_bias = np.where(ids == self.vocab.pad_id,
                            self.dtype.type(ATTN_NEG), self.dtype.type(0.0))
        attn_bias = Tensor(pad_bias[:, None, None, :].astype(self.dtype))

        for i in range(cfg.n_layers):
            pre = f"layer{i}"
            h = ad.layernorm(x, p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"], eps)
            q = h @ p[f"{pre}.attn.wq"] + p[f"{pre}.attn.bq"]
            k = h @ p[f"{pre}.attn.wk"] + p[f"{pre}.attn.bk"]
            v = h @ p[f"{pre}.attn.wv"] + p[f"{pre}.attn.bv"]
            q = ad.transpose(ad.reshape(q, (b, t, n_heads, dh)), (0, 2, 1, 3))
            k = ad.transpose(ad.reshape(k, (b, t, n_heads, dh)), (0, 2, 1, 3))
            v = ad.transpose(ad.reshape(v, (b, t, n_heads, dh)), (0, 2, 1, 3))
            scores = (q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
            attn = ad.softmax(scores + attn_bias)
            ctx = ad.reshape(ad.transpose(attn @ v, (0, 2, 1, 3)), (b, t, d))
            x = x + (ctx @ p[f"{pre}.attn.wo"] + p[f"{pre}.attn.bo"])
            h2 = ad.layernorm(x, p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"], eps)
            f = ad.gelu(h2 @ p[f"{pre}.ffn.w1"] + p[f"{pre}.ffn.b1"])
            x = x + (f @ p[f"{pre}.ffn.w2"] + p[f"{pre}.ffn.b2"])

        x = ad.layernorm(x, p["final_ln.gamma"], p["final_ln.beta"], eps)
        return x, tok

    def forward_logits(self, ids: np.ndarray, embed_delta: np.ndarray | None = None
                       ) -> tuple[Tensor, Tensor]:
        """Encoder + tied output projection. Returns (logits (B,T,V), tok node)."""
        hidden, tok = self.forward_hidden(ids, embed_delta)
        logits = hidden @ ad.transpose(self.params["emb.tok"], (1, 0)) + self.params["out_bias"]
        return logits, tok

    # -- inference ops -------------------------------------------------------

    def _check_mask_pos(self, tokens: np.ndarray, mask_pos: int) -> None:
        if not 0 <= mask_pos < len(tokens):
            raise IndexError(f"mask_pos {mask_pos} out of range for length {len(tokens)}")
        if tokens[mask_pos] != self.vocab.mask_id:
            raise ValueError(
                f"token at mask_pos {mask_pos} is id {tokens[mask_pos]}, not the mask id"
            )

    def predict_mask(self, tokens, mask_pos: int) -> np.ndarray:
        """Probability distribution over the vocabulary at the mask slot."""
        tokens = np.asarray(tokens, dtype=np.int64)
        self._check_mask_pos(tokens, mask_pos)
        with ad.no_grad():
            logits, _ = self.forward_logits(tokens[None, :])
        row = logits.data[0, mask_pos]
        shifted = row - row.max()
        e = np.exp(shifted)
        return e / e.sum()

    def masked_logprob_rows(self, rows: np.ndarray, positions: np.ndarray,
                            chunk: int = 512) -> np.ndarray:
        """Log-softmax rows at one position per input row: (R, V).

        ``rows`` is a padded (R, T) id batch; ``positions`` gives each
        row's mask index. Processed in chunks to bound peak memory.
        """
        rows = np.asarray(rows, dtype=np.int64)
        positions = np.asarray(positions, dtype=np.int64)
        out = []
        with ad.no_grad():
            for lo in range(0, len(rows), chunk):
                hi = min(lo + chunk, len(rows))
                logits, _ = self.forward_logits(rows[lo:hi])
                sel = logits.data[np.arange(hi - lo), positions[lo:hi]]
                out.append(ad.log_softmax_rows(sel))
        return np.concatenate(out, axis=0)

    def mask_grad(self, tokens, mask_pos: int, target: int,
                  trigger_span: tuple[int, int]) -> np.ndarray:
        """d(cross-entropy of target at the mask) / d(input embeddings of span).

        ``trigger_span`` is a half-open (start, end) index range. Returns a
        (span_len, d_model) matrix.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        self._check_mask_pos(tokens, mask_pos)
        start, end = trigger_span
        if not (0 <= start < end <= len(tokens)):
            raise ValueError(f"empty or out-of-bounds trigger span {trigger_span}")
        logits, tok = self.forward_logits(tokens[None, :])
        flat = ad.reshape(logits, (len(tokens), self.config.vocab_size))
        loss = ad.cross_entropy(ad.take_rows(flat, np.array([mask_pos])),
                                np.array([target]))
        loss.backward()
        return tok.grad[0, start:end, :].copy()

    def left_conditional(self, prefix, next_id: int) -> float:
        """p(next | prefix) read off a mask appended after the prefix.

        Prefixes longer than max_seq_len - 1 are truncated from the left.
        """
        prefix = list(prefix)
        if not prefix:
            raise ValueError("left_conditional: empty prefix")
        keep = self.config.max_seq_len - 1
        prefix = prefix[-keep:]
        ids = np.array(prefix + [self.vocab.mask_id], dtype=np.int64)
        return float(self.predict_mask(ids, len(ids) - 1)[next_id])

    def sentence_embedding(self, tokens) -> np.ndarray:
        """Mean of final-layer hidden states over non-pad positions."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size == 0:
            raise ValueError("sentence_embedding: empty token sequence")
        keep = tokens != self.vocab.pad_id
        if not keep.any():
            raise ValueError("sentence_embedding: all-pad input")
        with ad.no_grad():
            hidden, _ = self.forward_hidden(tokens[None, :])
        return hidden.data[0][keep].mean(axis=0)

    def pseudo_perplexity(self, tokens) -> float:
        """exp of the mean negative log-probability under mask-one-out scoring.

        Pad positions are skipped, so pad suffixing leaves the value
        unchanged.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size < 1:
            raise ValueError("pseudo_perplexity: empty token sequence")
        positions = np.flatnonzero(tokens != self.vocab.pad_id)
        if positions.size == 0:
            raise ValueError("pseudo_perplexity: all-pad input")
        rows = np.repeat(tokens[None, :], len(positions), axis=0)
        rows[np.arange(len(positions)), positions] = self.vocab.mask_id
        logprobs = self.masked_logprob_rows(rows, positions)
        picked = logprobs[np.arange(len(positions)), tokens[positions]]
        return float(np.exp(-picked.mean()))

    # -- training ------------------------------------------------------------

    def _finite_check(self, where: str) -> None:
        for name, p in self.params.items():
            if not np.isfinite(p.data).all():
                raise TrainingDiverged(f"non-finite weights in {name} after {where}")


def _mask_sequences(seqs: list[list[int]], mask_prob: float, mask_id: int,
                    rng: np.random.Generator) -> tuple[list[list[int]], list[tuple[int, int, int]]]:
    """Mask ~mask_prob of each sequence's positions (at least one)."""
    masked = []
    targets = []  # (row, pos, original id)
    for r, seq in enumerate(seqs):
        n = len(seq)
        k = max(1, int(round(mask_prob * n)))
        pos = rng.choice(n, size=min(k, n), replace=False)
        row = list(seq)
        for j in sorted(int(x) for x in pos):
            targets.append((r, j, row[j]))
            row[j] = mask_id
        masked.append(row)
    return masked, targets


def pretrain(corpus_lines: list[str], config: MlmConfig, train: TrainConfig,
             vocab: Vocabulary | None = None) -> MlmModel:
    """Train a fresh model with the masked-token objective.

    When ``vocab`` is omitted, one is built from the corpus with
    ``config.vocab_size`` as the cap, and the config is adjusted to the
    realized size.
    """
    from .vocab import build_vocab

    if not 0.0 < train.mask_prob < 1.0:
        raise ValueError(f"mask_prob must be in (0, 1), got {train.mask_prob}")
    if vocab is None:
        vocab = build_vocab(corpus_lines, max_size=config.vocab_size)
        cfg_dict = config.to_dict()
        cfg_dict["vocab_size"] = len(vocab)
        config = MlmConfig(**cfg_dict)

    seqs = []
    skipped = 0
    for line in corpus_lines:
        ids = vocab.encode(line)[: config.max_seq_len]
        if ids:
            seqs.append(ids)
        else:
            skipped += 1
    if not seqs:
        raise ValueError("pretrain: no encodable lines in corpus")
    if skipped:
        logger.info("pretrain: skipped %d empty lines", skipped)

    model = MlmModel(config, vocab)
    opt = AdamW(model.params, lr=train.lr, weight_decay=train.weight_decay)
    rng = stream(train.seed, "pretrain")
    losses = []
    step = 0
    for epoch in range(train.epochs):
        order = rng.permutation(len(seqs))
        epoch_losses = []
        for lo in range(0, len(order), train.batch_size):
            batch = [seqs[i] for i in order[lo: lo + train.batch_size]]
            masked, targets = _mask_sequences(batch, train.mask_prob, vocab.mask_id, rng)
            ids = pad_rows(masked, vocab.pad_id)
            logits, _ = model.forward_logits(ids)
            flat = ad.reshape(logits, (ids.shape[0] * ids.shape[1], config.vocab_size))
            flat_idx = np.array([r * ids.shape[1] + p for r, p, _ in targets])
            tgt = np.array([t for _, _, t in targets])
            loss = ad.cross_entropy(ad.take_rows(flat, flat_idx), tgt)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"pretrain loss is {value} at epoch {epoch} step {step}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(value)
            step += 1
        model._finite_check(f"epoch {epoch}")
        losses.append(float(np.mean(epoch_losses)))
        logger.info("pretrain epoch %d: mlm loss %.4f", epoch, losses[-1])
    model.train_log = {"kind": "pretrain", "epoch_losses": losses,
                       "epochs": train.epochs, "lr": train.lr,
                       "weight_decay": train.weight_decay,
                       "mask_prob": train.mask_prob, "seed": train.seed}
    return model
