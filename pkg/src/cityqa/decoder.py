"""Toy autoregressive answer decoder over a closed vocabulary.

One causal self-attention block plus a position-wise feed-forward, with
learned position embeddings and residual connections: the smallest decoder
that still factorizes P(answer | vision tokens, question tokens) into
stepwise conditionals. Vision tokens come from a linear projector applied to
the fused embedding and are prepended to the question tokens; answer tokens
follow, teacher-forced behind a BOS marker. Greedy argmax decoding only.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

from .numerics import Mlp, Parameter, ShapeError, as_matrix

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def words(text: str) -> list[str]:
    """Lowercase, replace punctuation with spaces, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


class Vocab:
    """Dense token<->id bijection with PAD/BOS/EOS/UNK reserved up front."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"vocab must start with the reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocab tokens must be unique")
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    pad_id = 0
    bos_id = 1
    eos_id = 2
    unk_id = 3

    @classmethod
    def build(cls, texts) -> "Vocab":
        """Vocabulary from a text corpus plus the digit strings 0..20."""
        seen = set()
        for text in texts:
            seen.update(words(text))
        seen.update(str(i) for i in range(21))
        return cls(list(RESERVED) + sorted(seen))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        return self.tokens[idx]


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """Token ids for `text`; words outside the vocabulary map to UNK."""
    return [vocab.id(w) for w in words(text)]


@dataclass
class DecoderConfig:
    model_dim: int = 16
    vision_token_count: int = 2
    max_question_len: int = 20
    max_answer_len: int = 8
    ff_dim: int = 32

    def __post_init__(self):
        if self.model_dim < 4:
            raise ValueError("model_dim must be >= 4")
        if self.vision_token_count < 1 or self.max_answer_len < 1:
            raise ValueError("vision_token_count and max_answer_len must be >= 1")

    @property
    def max_positions(self) -> int:
        return self.vision_token_count + self.max_question_len + 1 + self.max_answer_len


@dataclass
class DecoderInput:
    """Projected vision embeddings plus tokenized question."""

    h_v: np.ndarray  # (vision_token_count, model_dim)
    question_ids: list[int]

    def __post_init__(self):
        self.h_v = as_matrix(self.h_v)
        if self.h_v.shape[0] < 1:
            raise ShapeError("need at least one vision token")
        if not self.question_ids:
            raise ValueError("question token sequence is empty")


def project_vision(z, proj: Mlp, cfg: DecoderConfig) -> np.ndarray:
    """Project the fused latent into vision_token_count rows of model_dim."""
    vec = np.asarray(getattr(z, "z", z), dtype=np.float64).ravel()
    y, _ = proj.forward(vec)
    expected = cfg.vision_token_count * cfg.model_dim
    if y.size != expected:
        raise ShapeError(
            f"projector produced {y.size} values, need "
            f"{cfg.vision_token_count} x {cfg.model_dim} = {expected}"
        )
    return y.reshape(cfg.vision_token_count, cfg.model_dim)


def _log_softmax(row: np.ndarray) -> np.ndarray:
    m = row.max()
    return row - (m + np.log(np.exp(row - m).sum()))


@dataclass
class _Tape:
    seq_ids: list[int]
    n_vision: int
    x0: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    attn_out: np.ndarray
    x1: np.ndarray
    ffn_tape: list
    x2: np.ndarray
    logits: np.ndarray
    answer_rows: list[int]
    gold_ids: list[int]


class AnswerDecoder:
    """Single-block causal decoder; parameters live on the instance."""

    def __init__(self, cfg: DecoderConfig, vocab: Vocab, rng: np.random.Generator,
                 name: str = "decoder"):
        self.cfg = cfg
        self.vocab = vocab
        self.name = name
        d = cfg.model_dim
        bound = 1.0 / np.sqrt(d)

        def u(shape, pname):
            return Parameter(rng.uniform(-bound, bound, size=shape), name=f"{name}.{pname}")

        self.token_embedding = u((len(vocab), d), "token_embedding")
        self.position_embedding = u((cfg.max_positions, d), "position_embedding")
        self.attn_wq = u((d, d), "attn_wq")
        self.attn_wk = u((d, d), "attn_wk")
        self.attn_wv = u((d, d), "attn_wv")
        self.attn_wo = u((d, d), "attn_wo")
        self.ffn = Mlp([d, cfg.ff_dim, d], ["tanh", "identity"], rng, name=f"{name}.ffn")
        self.out_w = u((d, len(vocab)), "out_w")
        self.out_b = Parameter(np.zeros((1, len(vocab))), name=f"{name}.out_b")

    def parameters(self) -> list[Parameter]:
        return [
            self.token_embedding,
            self.position_embedding,
            self.attn_wq,
            self.attn_wk,
            self.attn_wv,
            self.attn_wo,
            *self.ffn.parameters(),
            self.out_w,
            self.out_b,
        ]

    # -- forward / backward over one full sequence --------------------------

    def _forward(self, inp: DecoderInput, forced_ids: list[int]) -> _Tape:
        """Run [h_v | question | BOS+forced answer ids] through the block."""
        cfg = self.cfg
        if inp.h_v.shape != (cfg.vision_token_count, cfg.model_dim):
            raise ShapeError(
                f"h_v has shape {inp.h_v.shape}, expected "
                f"({cfg.vision_token_count}, {cfg.model_dim})"
            )
        if len(inp.question_ids) > cfg.max_question_len:
            raise ShapeError(
                f"question has {len(inp.question_ids)} tokens, "
                f"max is {cfg.max_question_len}"
            )
        seq_ids = list(inp.question_ids) + [self.vocab.bos_id] + list(forced_ids)
        n = cfg.vision_token_count + len(seq_ids)
        if n > cfg.max_positions:
            raise ShapeError(f"sequence length {n} exceeds {cfg.max_positions} positions")

        x0 = np.vstack([inp.h_v, self.token_embedding.value[seq_ids]])
        x0 = x0 + self.position_embedding.value[:n]

        d = cfg.model_dim
        q = x0 @ self.attn_wq.value
        k = x0 @ self.attn_wk.value
        v = x0 @ self.attn_wv.value
        scores = (q @ k.T) / np.sqrt(d)
        scores = scores + np.triu(np.full((n, n), -np.inf), k=1)
        scores -= scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=1, keepdims=True)
        attn_out = attn @ v
        x1 = x0 + attn_out @ self.attn_wo.value

        f, ffn_tape = self.ffn.forward(x1)
        x2 = x1 + f
        logits = x2 @ self.out_w.value + self.out_b.value

        return _Tape(
            seq_ids=seq_ids,
            n_vision=cfg.vision_token_count,
            x0=x0, q=q, k=k, v=v, attn=attn, attn_out=attn_out,
            x1=x1, ffn_tape=ffn_tape, x2=x2, logits=logits,
            answer_rows=[], gold_ids=[],
        )

    def _backward(self, tape: _Tape, dlogits: np.ndarray) -> np.ndarray:
        """Backprop through head, FFN, and attention; returns grad w.r.t. h_v."""
        self.out_w.grad += tape.x2.T @ dlogits
        self.out_b.grad += dlogits.sum(axis=0, keepdims=True)
        dx2 = dlogits @ self.out_w.value.T

        dx1 = dx2 + self.ffn.backward(tape.ffn_tape, dx2)

        d = self.cfg.model_dim
        d_attn_proj = dx1
        self.attn_wo.grad += tape.attn_out.T @ d_attn_proj
        d_attn_out = d_attn_proj @ self.attn_wo.value.T
        d_attn = d_attn_out @ tape.v.T
        dv = tape.attn.T @ d_attn_out
        # softmax rows: masked entries have attn=0, so their dscores vanish
        dscores = tape.attn * (d_attn - (d_attn * tape.attn).sum(axis=1, keepdims=True))
        dq = (dscores @ tape.k) / np.sqrt(d)
        dk = (dscores.T @ tape.q) / np.sqrt(d)
        self.attn_wq.grad += tape.x0.T @ dq
        self.attn_wk.grad += tape.x0.T @ dk
        self.attn_wv.grad += tape.x0.T @ dv
        dx0 = dx1 + dq @ self.attn_wq.value.T + dk @ self.attn_wk.value.T + dv @ self.attn_wv.value.T

        n = dx0.shape[0]
        self.position_embedding.grad[:n] += dx0
        for row, tid in enumerate(tape.seq_ids):
            self.token_embedding.grad[tid] += dx0[tape.n_vision + row]
        return dx0[: tape.n_vision]

    # -- public operations ---------------------------------------------------

    def step_logprobs(self, inp: DecoderInput, answer_prefix: list[int]) -> np.ndarray:
        """log P(next answer token | h_v, question, prefix) over the vocab."""
        if len(answer_prefix) >= self.cfg.max_answer_len:
            raise ShapeError(
                f"prefix of length {len(answer_prefix)} leaves no room "
                f"(max_answer_len={self.cfg.max_answer_len})"
            )
        tape = self._forward(inp, list(answer_prefix))
        return _log_softmax(tape.logits[-1])

    def ce_loss(self, inp: DecoderInput, gold_ids: list[int]) -> tuple[float, _Tape]:
        """Teacher-forced mean negative log-likelihood of the gold answer.

        Gold must be EOS-terminated and fit max_answer_len; PAD positions,
        if any, are excluded from the mean.
        """
        gold_ids = list(gold_ids)
        if not gold_ids:
            raise ValueError("gold answer is empty")
        if gold_ids[-1] != self.vocab.eos_id:
            raise ValueError("gold answer must end with EOS")
        if len(gold_ids) > self.cfg.max_answer_len:
            raise ShapeError(
                f"gold answer has {len(gold_ids)} tokens, "
                f"max is {self.cfg.max_answer_len}"
            )
        tape = self._forward(inp, gold_ids[:-1])
        base = self.cfg.vision_token_count + len(inp.question_ids)
        rows = [base + j for j in range(len(gold_ids))
                if gold_ids[j] != self.vocab.pad_id]
        tape.answer_rows = rows
        tape.gold_ids = [g for g in gold_ids if g != self.vocab.pad_id]
        loss = 0.0
        for row, gold in zip(rows, tape.gold_ids):
            loss -= _log_softmax(tape.logits[row])[gold]
        return loss / len(rows), tape

    def ce_backward(self, tape: _Tape) -> np.ndarray:
        """Accumulate grads of the mean NLL; returns grad w.r.t. h_v."""
        if not tape.answer_rows:
            raise RuntimeError("tape does not come from ce_loss")
        dlogits = np.zeros_like(tape.logits)
        scale = 1.0 / len(tape.answer_rows)
        for row, gold in zip(tape.answer_rows, tape.gold_ids):
            logits = tape.logits[row]
            p = np.exp(logits - logits.max())
            p /= p.sum()
            p[gold] -= 1.0
            dlogits[row] = p * scale
        return self._backward(tape, dlogits)

    def greedy_decode(self, inp: DecoderInput) -> str:
        """Argmax decoding until EOS or max_answer_len; ties take the lowest id."""
        ids: list[int] = []
        for _ in range(self.cfg.max_answer_len):
            lp = self.step_logprobs(inp, ids)
            nxt = int(np.argmax(lp))
            if nxt == self.vocab.eos_id:
                break
            ids.append(nxt)
        reserved_ids = {self.vocab.pad_id, self.vocab.bos_id,
                        self.vocab.eos_id, self.vocab.unk_id}
        return " ".join(self.vocab.token(i) for i in ids if i not in reserved_ids)


def answer_ids(text: str, vocab: Vocab) -> list[int]:
    """Tokenized answer with the terminating EOS appended."""
    return tokenize(text, vocab) + [vocab.eos_id]
