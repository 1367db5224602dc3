"""Word-level tokenizer, autoregressive caption generation, and question
answering as classification over a fixed answer table.

Generation and QA take a `models` bundle with three methods:
  condition(voxels) -> Tensor[B, P, H]    cross-attention memory
  decode_logits(ids, cond) -> Tensor[B, T, vocab]
  decode_hidden(ids, cond) -> Tensor[B, T, H]
plus a `vocab` attribute. The stage-2 model bundle satisfies this; tests may
substitute stubs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .optim import AdamW, DivergenceError, clip_global_norm
from .tensor import NonFiniteError, ParameterError, Tensor

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

_RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")

PROMPT_TEMPLATE = "Question: {q} Answer:"


class Vocab:
    """Fixed word list behind the four reserved ids."""

    def __init__(self, words):
        words = list(words)
        if len(set(words)) != len(words):
            raise ParameterError("duplicate words in vocab")
        if set(words) & set(_RESERVED):
            raise ParameterError("reserved surface forms cannot be vocab words")
        self._words = _RESERVED + tuple(words)
        self._ids = {w: i for i, w in enumerate(self._words)}

    @classmethod
    def default(cls) -> "Vocab":
        from .datagen import all_grammar_words

        extra = [w for w in ("question", "answer", ":")
                 if w not in all_grammar_words()]
        return cls(all_grammar_words() + sorted(extra))

    def __len__(self):
        return len(self._words)

    def __contains__(self, word):
        return word in self._ids

    def id(self, word: str) -> int:
        return self._ids.get(word, UNK_ID)

    def word(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._words):
            raise ParameterError(f"token id {token_id} out of range")
        return self._words[token_id]


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple
    max_len: int
    truncated: bool = False

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        if not ids or ids[0] != BOS_ID:
            raise ParameterError("sequence must start with BOS")
        if len(ids) > self.max_len:
            raise ParameterError(f"sequence longer than max_len {self.max_len}")
        if ids.count(EOS_ID) > 1:
            raise ParameterError("more than one EOS")
        if EOS_ID in ids:
            tail = ids[ids.index(EOS_ID) + 1:]
            if any(t != PAD_ID for t in tail):
                raise ParameterError("only PAD may follow EOS")

    def __len__(self):
        return len(self.ids)

    def padded(self, length: int) -> tuple:
        if length < len(self.ids):
            raise ParameterError(f"pad length {length} < sequence length {len(self.ids)}")
        return self.ids + (PAD_ID,) * (length - len(self.ids))


def normalize(text: str) -> str:
    return " ".join(_TOKEN_RE.findall(text.lower()))


def word_split(text: str) -> list:
    """Lowercased surface words under the same rules tokenize uses."""
    return _TOKEN_RE.findall(text.lower())


def tokenize(text: str, vocab: Vocab, max_len: int = 64) -> TokenSequence:
    """[BOS] words [EOS], truncating the words (never the EOS) to fit."""
    if max_len < 2:
        raise ParameterError(f"max_len must be >= 2, got {max_len}")
    words = _TOKEN_RE.findall(text.lower())
    truncated = len(words) > max_len - 2
    if truncated:
        words = words[:max_len - 2]
    ids = (BOS_ID,) + tuple(vocab.id(w) for w in words) + (EOS_ID,)
    return TokenSequence(ids, max_len, truncated)


def detokenize(seq: TokenSequence, vocab: Vocab) -> str:
    words = []
    for i in seq.ids:
        if i == EOS_ID:
            break
        if i not in (PAD_ID, BOS_ID):
            words.append(vocab.word(i))
    return " ".join(words)


def teacher_forcing_batch(seqs) -> tuple:
    """Stack sequences into (inputs [B, T-1], targets [B, T-1]) int arrays,
    where targets are inputs shifted left and PAD marks ignored steps."""
    if not seqs:
        raise ParameterError("empty batch")
    width = max(len(s) for s in seqs)
    ids = np.array([s.padded(width) for s in seqs], dtype=np.int64)
    return ids[:, :-1], ids[:, 1:]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _next_token_logits(models, ids, cond) -> np.ndarray:
    batch = np.asarray(ids, dtype=np.int64)[None, :]
    logits = models.decode_logits(batch, cond)
    return logits.data[0, -1]


def generate_caption(voxels, models, max_len: int = 16, mode: str = "greedy",
                     seed=None, temp: float = 1.0) -> str:
    """Autoregressive decoding from BOS conditioned on the fMRI tokens.

    Greedy mode is deterministic; sample mode draws from the temperature-
    scaled softmax with the given seed.
    """
    if max_len < 1:
        raise ParameterError(f"max_len must be >= 1, got {max_len}")
    if mode not in ("greedy", "sample"):
        raise ParameterError(f"unknown mode {mode!r}")
    if mode == "sample" and temp <= 0:
        raise ParameterError(f"temp must be > 0, got {temp}")
    rng = np.random.default_rng(seed) if mode == "sample" else None
    with T.no_grad():
        cond = models.condition(np.asarray(voxels)[None, :])
        ids = [BOS_ID]
        for _ in range(max_len):
            logits = _next_token_logits(models, ids, cond)
            if mode == "greedy":
                nxt = int(logits.argmax())
            else:
                z = (logits - logits.max()) / temp
                p = np.exp(z)
                nxt = int(rng.choice(len(p), p=p / p.sum()))
            ids.append(nxt)
            if nxt == EOS_ID:
                break
    seq_ids = tuple(ids) if ids[-1] == EOS_ID else tuple(ids) + (EOS_ID,)
    return detokenize(TokenSequence(seq_ids, max_len + 2), models.vocab)


# ---------------------------------------------------------------------------
# question answering
# ---------------------------------------------------------------------------


def format_prompt(question: str) -> str:
    if not question or not question.strip():
        raise ParameterError("empty question")
    return PROMPT_TEMPLATE.format(q=question.strip())


def build_prompt(question: str, vocab: Vocab, max_len: int = 64) -> TokenSequence:
    """Tokenized prompt with no EOS: generation continues from its end."""
    words = _TOKEN_RE.findall(format_prompt(question).lower())
    if len(words) > max_len - 1:
        raise ParameterError("prompt exceeds max_len")
    ids = (BOS_ID,) + tuple(vocab.id(w) for w in words)
    return TokenSequence(ids, max_len)


class AnswerHead(Module):
    """Linear classifier over a fixed answer-string table, zero-initialized
    so early low-lr updates alone determine the ranking."""

    def __init__(self, hidden: int, classes, dtype=np.float32):
        classes = tuple(classes)
        if len(set(classes)) != len(classes):
            raise ParameterError("duplicate answer strings in class table")
        if not classes:
            raise ParameterError("empty class table")
        self.linear = Linear(hidden, len(classes), np.random.default_rng(0), dtype)
        self.linear.weight.data[:] = 0.0
        self.classes = classes

    def __call__(self, hidden: Tensor) -> Tensor:
        return self.linear(hidden)


class QaModels(Module):
    """Generation bundle plus answer head, checkpointable as one unit."""

    def __init__(self, models, head: AnswerHead):
        self.models = models
        self.head = head


def answer_question(voxels, question: str, models, head: AnswerHead):
    """(answer string, score vector) from the hidden state at the last
    prompt position."""
    if head is None:
        raise ParameterError("fine-tuned answer head required")
    prompt = build_prompt(question, models.vocab)
    with T.no_grad():
        cond = models.condition(np.asarray(voxels)[None, :])
        ids = np.asarray(prompt.ids, dtype=np.int64)[None, :]
        hidden = models.decode_hidden(ids, cond)
        last = hidden.data[0, -1:]
        scores = head(Tensor(last, dtype=head.linear.weight.dtype)).data[0]
    return head.classes[int(scores.argmax())], scores


def _prompt_features(samples, models) -> np.ndarray:
    """Hidden state at the last prompt position for every (voxels, question)."""
    feats = []
    with T.no_grad():
        for voxels, question, _ in samples:
            cond = models.condition(np.asarray(voxels)[None, :])
            ids = np.asarray(build_prompt(question, models.vocab).ids,
                             dtype=np.int64)[None, :]
            feats.append(models.decode_hidden(ids, cond).data[0, -1])
    return np.stack(feats)


def finetune_qa(samples, models, head: AnswerHead, steps: int, seed,
                lr: float = 1e-6, weight_decay: float = 0.1,
                batch_size: int = 16, unfreeze_decoder=None):
    """Cross-entropy training of the answer head.

    samples: list of (voxels, question, class_id). Head-only by default, in
    which case prompt features are computed once and cached. Passing a
    module as unfreeze_decoder trains its parameters too (features are then
    recomputed every step).
    """
    if steps < 0:
        raise ParameterError(f"steps must be >= 0, got {steps}")
    if not samples:
        raise ParameterError("empty QA dataset")
    n_classes = len(head.classes)
    labels = np.array([c for _, _, c in samples], dtype=np.int64)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise IndexError(f"class id out of range [0, {n_classes})")

    named = list(head.named_parameters(prefix="head."))
    if unfreeze_decoder is not None:
        named += list(unfreeze_decoder.named_parameters(prefix="decoder."))
    opt = AdamW(named, lr=lr, betas=(0.9, 0.95), weight_decay=weight_decay)

    cached = None if unfreeze_decoder is not None else _prompt_features(samples, models)
    n = len(samples)
    trace = []
    for step in range(steps):
        rng = np.random.default_rng([seed, 4, step])
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        try:
            T.reset_tape()
            if cached is not None:
                feats = Tensor(cached[idx], dtype=head.linear.weight.dtype)
            else:
                batch = [samples[i] for i in idx]
                f = []
                for voxels, question, _ in batch:
                    cond = models.condition(np.asarray(voxels)[None, :])
                    ids = np.asarray(build_prompt(question, models.vocab).ids,
                                     dtype=np.int64)[None, :]
                    f.append(T.take_positions(
                        models.decode_hidden(ids, cond),
                        np.array([ids.shape[1] - 1])))
                feats = T.concat_rows(f)
            loss = T.cross_entropy(head(feats), labels[idx])
            opt.zero_grad()
            T.backward(loss)
            clip_global_norm(opt.params, 1.0)
            opt.step()
        except NonFiniteError as e:
            raise DivergenceError(step, str(e)) from e
        trace.append(float(loss.data))
    return trace
