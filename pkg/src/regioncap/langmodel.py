"""LSTM caption generator conditioned on region codes.

Token index layout: END = 0, UNK = 1, regular words from 2 up, and START as
the final index.  START is input-only: the output projection has one logit
per regular word plus END and UNK, so START can never be a prediction target
and a uniform-logit model scores exactly ln(number of word types + 1), END
included.  UNK is additionally masked during generation.

Teacher forcing feeds T+2 input vectors for a T-token caption: the encoded
region code, the START embedding, then the T token embeddings.  The output
after the code input is ignored; the remaining T+1 outputs are scored against
the shifted tokens with END as the final target.  ``caption_loss`` and
``sequence_logprob`` share the same forward path, so

    caption_loss == -sequence_logprob / (T + 1)

holds per region by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, DataError


class Vocabulary:
    """Token <-> index bijection with reserved END/UNK/START indices."""

    END = 0
    UNK = 1
    WORD_BASE = 2

    END_TOKEN = "<end>"
    UNK_TOKEN = "<unk>"
    START_TOKEN = "<start>"

    def __init__(self, words: Sequence[str]):
        words = list(words)
        specials = {self.END_TOKEN, self.UNK_TOKEN, self.START_TOKEN}
        if len(set(words)) != len(words) or specials & set(words):
            raise ContractViolation("vocabulary words must be unique and non-reserved")
        self.words = words
        self._index: Dict[str, int] = {w: self.WORD_BASE + i for i, w in enumerate(words)}

    @property
    def start_index(self) -> int:
        return self.WORD_BASE + len(self.words)

    @property
    def n_logits(self) -> int:
        """Prediction targets: all words + UNK + END (START excluded)."""
        return len(self.words) + 2

    @property
    def n_embeddings(self) -> int:
        return len(self.words) + 3

    def encode(self, tokens: Sequence[str]) -> List[int]:
        """Map tokens to indices, unknown words to UNK."""
        return [self._index.get(t, self.UNK) for t in tokens]

    def decode(self, indices: Sequence[int]) -> List[str]:
        out = []
        for i in indices:
            if i == self.END:
                out.append(self.END_TOKEN)
            elif i == self.UNK:
                out.append(self.UNK_TOKEN)
            elif i == self.start_index:
                out.append(self.START_TOKEN)
            else:
                out.append(self.words[i - self.WORD_BASE])
        return out

    def __len__(self) -> int:
        return len(self.words)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.words == other.words

    def save(self, path) -> None:
        """One regular word per line; line number = index - 2 (after END, UNK)."""
        Path(path).write_text("".join(w + "\n" for w in self.words), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise DataError(f"cannot read vocabulary file {path}: {e}") from e
        return cls([ln for ln in lines if ln])


def validate_caption(indices: Sequence[int], vocab: Vocabulary) -> np.ndarray:
    idx = np.asarray(list(indices), dtype=np.intp)
    if idx.size < 1:
        raise ContractViolation("caption must contain at least one token")
    if idx.min() < 0 or idx.max() >= vocab.n_logits:
        raise ContractViolation("caption token outside the vocabulary's target range")
    if np.any(idx == vocab.END):
        raise ContractViolation("caption must not contain the END token")
    return idx


@dataclass
class CaptionParams:
    """Learned tensors of the captioner; names are checkpoint keys."""

    embed: ad.Tensor    # (n_embeddings, E)
    cond_w: ad.Tensor   # (D, E)
    cond_b: ad.Tensor   # (E,)
    wx: ad.Tensor       # (E, 4H)
    wh: ad.Tensor       # (H, 4H)
    b: ad.Tensor        # (4H,)
    out_w: ad.Tensor    # (H, n_logits)
    out_b: ad.Tensor    # (n_logits,)

    def named(self) -> Dict[str, ad.Tensor]:
        return {f"lang.{k}": getattr(self, k) for k in
                ("embed", "cond_w", "cond_b", "wx", "wh", "b", "out_w", "out_b")}


class CaptionModel:
    def __init__(self, vocab: Vocabulary, code_dim: int, embed_dim: int, hidden_dim: int,
                 params: Optional[CaptionParams] = None):
        self.vocab = vocab
        self.code_dim = code_dim
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.params = params

    def init_params(self, rng: np.random.Generator, std: float = 0.01,
                    dtype=np.float32, forget_bias: float = 1.5) -> None:
        """Fan-in-scaled weights throughout; the forget-gate bias starts
        positive so the visual state from the conditioning step survives
        across the caption, which is what lets the code influence every
        word prediction early in training."""
        def w(shape, scale):
            return ad.Tensor(rng.normal(0.0, scale, size=shape).astype(dtype),
                             requires_grad=True)

        def z(shape):
            return ad.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        v, e, h = self.vocab, self.embed_dim, self.hidden_dim
        b = np.zeros(4 * h, dtype=dtype)
        b[h:2 * h] = forget_bias
        self.params = CaptionParams(
            embed=w((v.n_embeddings, e), 0.1),
            cond_w=w((self.code_dim, e), np.sqrt(2.0 / self.code_dim)), cond_b=z((e,)),
            wx=w((e, 4 * h), 1.0 / np.sqrt(e)), wh=w((h, 4 * h), 1.0 / np.sqrt(h)),
            b=ad.Tensor(b, requires_grad=True),
            out_w=w((h, v.n_logits), 1.0 / np.sqrt(h)), out_b=z((v.n_logits,)),
        )

    # ------------------------------------------------------------------
    # Shared teacher-forced forward

    def condition(self, codes: ad.Tensor) -> ad.Tensor:
        """Region code -> first LSTM input: linear map then ReLU."""
        p = self.params
        return ad.relu(ad.linear(codes, p.cond_w, p.cond_b))

    def _pad_targets(self, captions: Sequence[Sequence[int]]):
        """Targets (s_2..s_T, END) padded with END; returns lengths too."""
        lengths = np.array([len(c) for c in captions], dtype=np.intp)
        if np.any(lengths < 1):
            raise ContractViolation("empty caption")
        tmax = int(lengths.max())
        tokens = np.zeros((len(captions), tmax), dtype=np.intp)
        targets = np.zeros((len(captions), tmax + 1), dtype=np.intp)  # END pad
        for r, cap in enumerate(captions):
            idx = validate_caption(cap, self.vocab)
            tokens[r, :len(idx)] = idx
            targets[r, :len(idx)] = idx
            targets[r, len(idx)] = self.vocab.END
        return tokens, targets, lengths

    def teacher_logits(self, codes: ad.Tensor, captions: Sequence[Sequence[int]]):
        """Run T+2 steps; return logits for the T+1 scored steps.

        Output shape (N*(Tmax+1), n_logits) in step-major order row blocks
        [step0 rows.., step1 rows..]; rows of shorter captions beyond their
        length are computed but meant to be masked by the caller.
        """
        p = self.params
        n = codes.shape[0]
        tokens, targets, lengths = self._pad_targets(captions)
        tmax = tokens.shape[1]

        dtype = p.wx.dtype
        h = ad.Tensor(np.zeros((n, self.hidden_dim), dtype=dtype))
        c = ad.Tensor(np.zeros((n, self.hidden_dim), dtype=dtype))
        h, c = ad.lstm_step(self.condition(codes), h, c, p.wx, p.wh, p.b)  # y ignored
        start = ad.gather_rows(p.embed, np.full(n, self.vocab.start_index, dtype=np.intp))
        h, c = ad.lstm_step(start, h, c, p.wx, p.wh, p.b)
        hiddens = [h]
        for t in range(tmax):
            xt = ad.gather_rows(p.embed, tokens[:, t])
            h, c = ad.lstm_step(xt, h, c, p.wx, p.wh, p.b)
            hiddens.append(h)
        stacked = ad.concat0(hiddens)  # ((Tmax+1)*N, H), step-major
        logits = ad.linear(stacked, p.out_w, p.out_b)
        return logits, targets, lengths

    def caption_loss(self, codes: ad.Tensor, captions: Sequence[Sequence[int]]) -> ad.Tensor:
        """Mean over regions of the per-region mean step cross-entropy."""
        n = codes.shape[0]
        if n != len(captions):
            raise ContractViolation(f"{n} codes vs {len(captions)} captions")
        logits, targets, lengths = self.teacher_logits(codes, captions)
        tmax1 = targets.shape[1]
        steps = np.arange(tmax1)[None, :]
        mask = steps <= lengths[:, None]  # steps 0..T scored (T+1 of them)
        w = mask / ((lengths + 1)[:, None] * n)
        # step-major flattening to match concat0 order
        return ad.weighted_softmax_cross_entropy(
            logits, targets.T.reshape(-1), w.T.reshape(-1).astype(logits.dtype))

    def sequence_logprob(self, codes: ad.Tensor, captions: Sequence[Sequence[int]]) -> np.ndarray:
        """Per-region sum of log-softmax at the targets, END step included."""
        n = codes.shape[0]
        logits, targets, lengths = self.teacher_logits(codes, captions)
        logp = ad.log_softmax_np(logits.data)
        tmax1 = targets.shape[1]
        picked = logp[np.arange(n * tmax1), targets.T.reshape(-1)].reshape(tmax1, n)
        mask = (np.arange(tmax1)[:, None] <= lengths[None, :])
        return (picked * mask).sum(axis=0)

    def logprob_matrix(self, codes: ad.Tensor, captions: Sequence[Sequence[int]],
                       length_normalized: bool = False) -> np.ndarray:
        """(Q, P) log-probabilities of Q captions against P region codes."""
        q, p = len(captions), codes.shape[0]
        if q == 0:
            return np.zeros((0, p))
        rep_codes = ad.Tensor(np.repeat(codes.data, q, axis=0))
        caps = [captions[i % q] for i in range(p * q)]
        lp = self.sequence_logprob(rep_codes, caps).reshape(p, q).T
        if length_normalized:
            lens = np.array([len(c) + 1 for c in captions], dtype=np.float64)
            lp = lp / lens[:, None]
        return lp

    def generate(self, codes: ad.Tensor, max_len: int) -> List[List[int]]:
        """Greedy decoding: argmax token per step until END or max_len.

        UNK is masked out of the argmax; START is not a logit at all.
        Deterministic given weights and codes.
        """
        p = self.params
        n = codes.shape[0]
        dtype = p.wx.dtype
        h = ad.Tensor(np.zeros((n, self.hidden_dim), dtype=dtype))
        c = ad.Tensor(np.zeros((n, self.hidden_dim), dtype=dtype))
        h, c = ad.lstm_step(self.condition(codes), h, c, p.wx, p.wh, p.b)
        current = np.full(n, self.vocab.start_index, dtype=np.intp)
        done = np.zeros(n, dtype=bool)
        out: List[List[int]] = [[] for _ in range(n)]
        for _ in range(max_len + 1):
            xt = ad.gather_rows(p.embed, current)
            h, c = ad.lstm_step(xt, h, c, p.wx, p.wh, p.b)
            logits = ad.linear(h, p.out_w, p.out_b).data.copy()
            logits[:, self.vocab.UNK] = -np.inf
            nxt = logits.argmax(axis=1)
            for r in range(n):
                if done[r]:
                    continue
                if nxt[r] == self.vocab.END or len(out[r]) >= max_len:
                    done[r] = True
                else:
                    out[r].append(int(nxt[r]))
            if done.all():
                break
            current = np.where(done, self.vocab.END, nxt)
        return out
