"""Decoding: beam search generation and closed-ended answer ranking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .model import FusionModel
from .text import BOS, CAPTION_PROMPT, DEFAULT_VOCAB, EOS


@dataclass
class GenerationResult:
    tokens: np.ndarray      # generated tokens, ending with EOS unless truncated
    score: float            # accumulated log-prob / token count
    truncated: bool


def _log_softmax(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    return shifted - np.log(np.exp(shifted).sum())


def _next_log_probs(model, z, prompt_ids, tokens):
    inputs = np.concatenate([[BOS], prompt_ids, tokens]).astype(np.int64)
    logits = model.decoder_forward(z, inputs)
    return _log_softmax(logits.data[-1])


def generate(model: FusionModel, z, prompt_ids, beam: int = 3,
             max_len: int = 16) -> GenerationResult:
    """Length-normalized beam search; ties prefer the lexicographically
    smaller token sequence. If nothing finishes within ``max_len`` the best
    unfinished hypothesis is returned with the truncation flag set."""
    if beam < 1:
        raise ContractError(f"beam width must be >= 1, got {beam}")
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)

    with T.no_grad():
        live = [((), 0.0)]
        completed = []
        for _ in range(max_len):
            expansions = []
            for tokens, logp in live:
                log_probs = _next_log_probs(model, z, prompt_ids,
                                            np.array(tokens, dtype=np.int64))
                for token, token_logp in enumerate(log_probs):
                    expansions.append((tokens + (token,), logp + token_logp))
            expansions.sort(key=lambda e: (-e[1], e[0]))
            live = []
            for tokens, logp in expansions[:beam]:
                if tokens[-1] == EOS:
                    completed.append((tokens, logp / len(tokens)))
                else:
                    live.append((tokens, logp))
            if not live:
                break

    if completed:
        completed.sort(key=lambda c: (-c[1], c[0]))
        tokens, score = completed[0]
        return GenerationResult(np.array(tokens, dtype=np.int64), score, False)
    live.sort(key=lambda c: (-c[1] / len(c[0]), c[0]))
    tokens, logp = live[0]
    return GenerationResult(np.array(tokens, dtype=np.int64),
                            logp / len(tokens), True)


def rank_closed_ended(model: FusionModel, z, prefix_ids, candidates):
    """Choose among candidate completions by mean per-token log-likelihood.

    Returns (best index, per-candidate scores); ties go to the lowest
    original index. Candidate scores are independent of each other.
    """
    candidates = list(candidates)
    if not candidates:
        raise ContractError("candidate list is empty")
    prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
    scores = []
    with T.no_grad():
        for candidate in candidates:
            candidate = np.asarray(candidate, dtype=np.int64)
            if candidate.size == 0:
                raise ContractError("empty candidate sequence")
            full = np.concatenate([prefix_ids, candidate])
            inputs = np.concatenate([[BOS], full[:-1]])
            logits = model.decoder_forward(z, inputs).data
            total = 0.0
            for offset, token in enumerate(candidate):
                row = _log_softmax(logits[len(prefix_ids) + offset])
                total += row[token]
            scores.append(total / len(candidate))
    best = int(np.argmax(scores))
    return best, scores


def caption(model: FusionModel, rgb, expert_maps=(), beam: int = 3,
            max_len: int = 20, vocab=DEFAULT_VOCAB) -> str:
    """Open-ended caption with the fixed prompt prepended and stripped."""
    with T.no_grad():
        z = model.encoder_forward(rgb, expert_maps)
    prompt = vocab.encode(CAPTION_PROMPT)
    result = generate(model, z, prompt, beam=beam, max_len=max_len)
    return vocab.decode(result.tokens)
