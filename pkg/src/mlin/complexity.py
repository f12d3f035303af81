"""Message-passing counts for co-, self-, intra/inter-modality and latent (MLI) attention.

A message is one query-key interaction, i.e. one scalar attention logit.
``count_closed_form`` gives the formulas; ``count_instrumented`` actually runs
each topology on width-1 dummy features and tallies the logits produced.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class Mechanism(str, enum.Enum):
    CO_ATTENTION = "CoAttention"
    SELF_ATTENTION = "SelfAttention"
    INTRA_INTER = "IntraInter"
    MLI = "MLI"


@dataclass(frozen=True)
class MessageCount:
    mechanism: Mechanism
    M: int
    N: int
    k: int
    messages: int


def _check(M: int, N: int, k: int) -> None:
    if M < 1 or N < 1 or k < 1:
        raise ValueError(f"M, N and k must be >= 1, got M={M} N={N} k={k}")


def count_closed_form(mechanism, M: int, N: int, k: int = 1) -> int:
    _check(M, N, k)
    mech = Mechanism(mechanism)
    if mech is Mechanism.CO_ATTENTION:
        return 2 * M * N
    if mech is Mechanism.SELF_ATTENTION:
        return M * M + N * N
    if mech is Mechanism.INTRA_INTER:
        return (M + N) * (M + N)
    return k * k * (M + N)


def summarization_messages(M: int, N: int, k: int) -> int:
    """Logits spent forming the k summaries per modality (reported apart from the MLI count)."""
    _check(M, N, k)
    return k * (M + N)


class CountingExecutor:
    """Runs attention score computations and tallies every logit evaluated."""

    def __init__(self):
        self.messages = 0

    def attend(self, queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
        scores = queries @ keys.T
        self.messages += scores.size
        return scores


def _run(mechanism: Mechanism, M: int, N: int, k: int, ex: CountingExecutor) -> None:
    regions, words = np.ones((M, 1)), np.ones((N, 1))
    if mechanism in (Mechanism.CO_ATTENTION, Mechanism.INTRA_INTER):
        ex.attend(words, regions)   # each word reads every region
        ex.attend(regions, words)   # and vice versa
    if mechanism in (Mechanism.SELF_ATTENTION, Mechanism.INTRA_INTER):
        ex.attend(regions, regions)
        ex.attend(words, words)
    if mechanism is Mechanism.MLI:
        latents = np.ones((k * k, 1))
        ex.attend(regions, latents)  # redistribution to regions
        ex.attend(words, latents)    # and to words


def count_instrumented(mechanism, M: int, N: int, k: int = 1) -> int:
    _check(M, N, k)
    ex = CountingExecutor()
    _run(Mechanism(mechanism), M, N, k, ex)
    return ex.messages


def compare_table(M: int, N: int, k_list: Sequence[int]) -> list[dict]:
    """One row per (mechanism, k).  ``with_summarization`` is filled only for MLI."""
    rows = []
    for k in k_list:
        for mech in Mechanism:
            extended: Optional[int] = None
            messages = count_closed_form(mech, M, N, k)
            if mech is Mechanism.MLI:
                extended = messages + summarization_messages(M, N, k)
            rows.append({
                "mechanism": mech.value, "M": M, "N": N, "k": k,
                "messages": messages, "with_summarization": extended,
            })
    return rows


def table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["mechanism", "M", "N", "k", "messages", "with_summarization"],
                            lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({key: ("" if v is None else v) for key, v in row.items()})
    return buf.getvalue()
