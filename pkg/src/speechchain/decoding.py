"""Greedy and beam search over an abstract step function.

A step function maps ``(state, last_tokens)`` to ``(log_probs, state)``
where ``log_probs`` is ``(rows, C)`` and every array in ``state`` has
``rows`` on its first axis, so hypotheses can be re-indexed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

StepFn = Callable[[tuple, np.ndarray], tuple]


@dataclass
class Hypothesis:
    tokens: list
    log_prob: float
    finished: bool = True


def select_rows(state: tuple, rows) -> tuple:
    return tuple(s[rows] for s in state)


def greedy_search(step: StepFn, state: tuple, sos: int, eos: int, max_len: int) -> Hypothesis:
    """Feed back the arg-max token until ``eos`` or ``max_len`` tokens."""
    tokens: list = []
    total = 0.0
    last = np.array([sos])
    for _ in range(max_len):
        logp, state = step(state, last)
        tok = int(np.argmax(logp[0]))
        total += float(logp[0, tok])
        tokens.append(tok)
        if tok == eos:
            return Hypothesis(tokens, total, True)
        last = np.array([tok])
    return Hypothesis(tokens, total, False)


def beam_search(step: StepFn, state: tuple, sos: int, eos: int, beam: int, max_len: int,
                seed: Hypothesis | None = None) -> Hypothesis:
    """Beam search scored by the raw sum of token log-probabilities.

    Each step keeps the ``beam`` best of the ``rows x C`` expansions.
    Expansions ending in ``eos`` move to a finished pool and are never
    extended again; hypotheses still open at ``max_len`` join the pool as
    truncated.  Search stops early once no open hypothesis can beat the
    pool, since scores only decrease.  ``seed`` pre-populates the pool
    (the ASR passes its greedy result, so beam output never scores below
    greedy).
    """
    if beam < 1:
        raise ValueError("beam size must be at least 1")
    pool: list[Hypothesis] = [seed] if seed is not None else []
    hyps = [[]]
    scores = np.zeros(1)
    last = np.array([sos])
    for t in range(max_len):
        logp, state = step(state, last)
        C = logp.shape[1]
        cand = (scores[:, None] + logp).reshape(-1)
        order = np.argsort(-cand, kind="stable")[:beam]
        keep_rows, keep_tok, keep_scores, keep_hyps = [], [], [], []
        for idx in order:
            r, c = divmod(int(idx), C)
            toks = hyps[r] + [c]
            if c == eos:
                pool.append(Hypothesis(toks, float(cand[idx]), True))
            else:
                keep_rows.append(r)
                keep_tok.append(c)
                keep_scores.append(float(cand[idx]))
                keep_hyps.append(toks)
        if not keep_hyps:
            break
        if t == max_len - 1:
            pool.extend(Hypothesis(h, s, False) for h, s in zip(keep_hyps, keep_scores))
            break
        best_done = max((h.log_prob for h in pool), default=-np.inf)
        if best_done >= keep_scores[0]:
            break
        hyps = keep_hyps
        scores = np.asarray(keep_scores)
        last = np.asarray(keep_tok)
        state = select_rows(state, np.asarray(keep_rows))
    best = pool[0]
    for h in pool[1:]:
        if h.log_prob > best.log_prob:
            best = h
    return best


def enumerate_sequences(log_prob_fn: Callable[[tuple], np.ndarray], C: int, eos: int,
                        max_len: int) -> list:
    """Every sequence up to ``max_len`` tokens (stopping at ``eos``) with its
    total log-probability; ``log_prob_fn(prefix)`` returns the next-token
    distribution.  Brute-force reference for small toy models."""
    out = []

    def rec(prefix, score):
        if len(prefix) == max_len:
            out.append((tuple(prefix), score))
            return
        lp = log_prob_fn(tuple(prefix))
        for c in range(C):
            if c == eos:
                out.append((tuple(prefix) + (c,), score + float(lp[c])))
            else:
                rec(prefix + [c], score + float(lp[c]))

    rec([], 0.0)
    return out
