"""Constrained decoding: type masks, guidance, greedy/beam/top-k, SlowFast.

Every distribution a token is drawn from goes through the same pipeline::

    guidance -> type mask -> temperature -> top-k -> softmax

so each emitted id lies in the valid set of its slot and every output parses
back into an asset.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
import torch

from .asset_model import PhraseBundle
from .model import AssetFormer
from .pcg import phrase_ids
from .tokenizer import (
    EOS_ID,
    TUPLE_LEN,
    VALID_MASKS,
    VOCAB_SIZE,
    TokenType,
    check_schedule,
    token_type_at,
)

_MASKS = torch.from_numpy(VALID_MASKS.copy())
Condition = PhraseBundle | Sequence[int] | None


class Strategy(str, Enum):
    GREEDY = "greedy"
    BEAM = "beam"
    TOPK = "topk"


@dataclass(frozen=True)
class SamplingParams:
    strategy: Strategy = Strategy.TOPK
    temperature: float = 0.7
    top_k: int = 10
    beam_width: int = 4
    # None disables guidance (conditional branch only)
    cfg_scale: float | None = 2.0
    max_tokens: int = 5000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.top_k < 1 or self.beam_width < 1:
            raise ValueError("top_k and beam_width must be >= 1")
        if self.cfg_scale is not None and self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if self.max_tokens < 0:
            raise ValueError("max_tokens must be >= 0")


@dataclass(frozen=True)
class SlowFastParams:
    lookahead: int = 5

    def __post_init__(self):
        if self.lookahead < 1:
            raise ValueError("lookahead must be >= 1")


# ---------------------------------------------------------------------------
# Logit pipeline


def type_mask(logits: torch.Tensor, expected: TokenType) -> torch.Tensor:
    """Set every id outside the slot's valid set to -inf (last dim is the vocabulary)."""
    return logits.masked_fill(~_MASKS[expected], float("-inf"))


def cfg_combine(l_cond, l_uncond, s: float):
    """Guided logits ``l' + s (l - l')``.

    Evaluated as ``(1 - s) l' + s l``, the same affine map, so that s = 1 and
    s = 0 return one branch bit for bit.
    """
    return (1.0 - s) * l_uncond + s * l_cond


def token_probs(masked: torch.Tensor, params: SamplingParams) -> np.ndarray:
    """Distribution over the vocabulary from an already masked logit row."""
    row = masked.detach().to(torch.float64).numpy()
    probs = np.zeros(VOCAB_SIZE)
    if params.strategy is not Strategy.TOPK:
        probs[int(np.argmax(row))] = 1.0
        return probs
    z = row / params.temperature
    finite = np.flatnonzero(np.isfinite(z))
    if params.top_k < len(finite):
        # stable: ties at the threshold resolve to the lower id
        order = finite[np.argsort(-z[finite], kind="stable")]
        finite = np.sort(order[:params.top_k])
    zf = z[finite]
    e = np.exp(zf - zf.max())
    probs[finite] = e / e.sum()
    return probs


def draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(probs) - 1)


# ---------------------------------------------------------------------------
# Incremental decoding state


def condition_ids(condition: Condition) -> list[int] | None:
    if condition is None:
        return None
    if isinstance(condition, PhraseBundle):
        return phrase_ids(condition)
    ids = [int(c) for c in condition]
    if len(ids) != 4:
        raise ValueError("condition needs 4 phrase ids")
    return ids


class DecodeState:
    """One decoding session: KV cache(s) for the guidance branches of a model.

    Depending on the guidance scale the session runs the conditional branch,
    the unconditional branch, or both as a batch of two rows.
    """

    def __init__(self, model: AssetFormer, condition: Condition, cfg_scale: float | None, rows: int = 1):
        self.model = model
        self.cfg_scale = cfg_scale
        ids = condition_ids(condition)
        cond_row = torch.tensor([ids], dtype=torch.long) if ids is not None else model.null_condition(1)
        null_row = model.null_condition(1)
        if cfg_scale is None or cfg_scale == 1.0:
            branches = [cond_row]
        elif cfg_scale == 0.0:
            branches = [null_row]
        else:
            branches = [cond_row, null_row]
        self.n_branches = len(branches)
        self.rows = rows
        # row layout: branch-major, i.e. [cond x rows, uncond x rows]
        self.cond = torch.cat([b.expand(rows, -1) for b in branches], dim=0)
        self.cache = model.new_cache(self.n_branches * rows)
        self.n_cond = model.cfg.n_cond_slots
        self.tokens_fed = 0

    def _combine(self, logits: torch.Tensor) -> torch.Tensor:
        if self.n_branches == 1:
            return logits
        l_cond, l_uncond = logits[:self.rows], logits[self.rows:]
        return cfg_combine(l_cond, l_uncond, self.cfg_scale)

    @torch.no_grad()
    def prefill(self, tokens: Sequence[int] = ()) -> torch.Tensor:
        """Consume the condition slots plus ``tokens``; combined logits (rows, 1 + T, V)."""
        t = torch.tensor([list(tokens)], dtype=torch.long).expand(self.cond.shape[0], -1)
        out = self.model(t, self.cond, self.cache, return_prefix=True)
        self.tokens_fed = len(tokens)
        return self._combine(out)

    @torch.no_grad()
    def feed(self, tokens: Sequence[int] | torch.Tensor) -> torch.Tensor:
        """Append tokens (same for every row, or a (rows, T) tensor); combined logits (rows, T, V)."""
        if not isinstance(tokens, torch.Tensor):
            tokens = torch.tensor([list(tokens)], dtype=torch.long).expand(self.rows, -1)
        t = tokens.repeat(self.n_branches, 1) if self.n_branches > 1 else tokens
        out = self.model(t, None, self.cache)
        self.tokens_fed += tokens.shape[1]
        return self._combine(out)

    def rewind(self, n_tokens: int) -> None:
        self.cache.truncate(self.n_cond + n_tokens)
        self.tokens_fed = n_tokens

    def reorder(self, rows: Sequence[int]) -> None:
        """Select/duplicate rows (beam search); branch layout is preserved."""
        idx = torch.tensor(list(rows), dtype=torch.long)
        full = torch.cat([idx + b * self.rows for b in range(self.n_branches)])
        L = self.cache.length
        for layer in range(len(self.cache.k)):
            for buf in (self.cache.k, self.cache.v):
                new = torch.zeros((len(full),) + buf[layer].shape[1:], dtype=buf[layer].dtype)
                new[:, :, :L] = buf[layer][full, :, :L]
                buf[layer] = new
        self.rows = len(idx)
        self.cond = self.cond[full]


def sample_next(logits: torch.Tensor, slot: TokenType, params: SamplingParams,
                rng: np.random.Generator) -> int:
    """Choose one id from a guided logit row for a slot of type ``slot``.

    Greedy takes the argmax of the masked row; top-k applies temperature,
    truncation and a seeded draw.
    """
    masked = type_mask(logits, slot)
    if params.strategy is not Strategy.TOPK:
        return int(torch.argmax(masked))
    return draw(token_probs(masked, params), rng)


def _token_limit(model: AssetFormer, params: SamplingParams, prefix_len: int = 0) -> int:
    room = model.cfg.max_seq_len - model.cfg.n_cond_slots
    limit = min(params.max_tokens, room)
    return max(prefix_len, (limit // TUPLE_LEN) * TUPLE_LEN)


@dataclass
class GenerationResult:
    tokens: list[int]
    truncated: bool = False
    seconds: float = 0.0
    new_tokens: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def tokens_per_s(self) -> float:
        return self.new_tokens / self.seconds if self.seconds > 0 else float("inf")


def generate(model: AssetFormer, condition: Condition, params: SamplingParams,
             prefix: Sequence[int] = ()) -> GenerationResult:
    """Autoregressive decoding from the condition slots until EOS.

    If the token budget is exhausted an EOS is appended at the next tuple
    boundary and ``truncated`` is set.
    """
    if params.strategy is Strategy.BEAM:
        return beam_search(model, condition, params.beam_width, params, prefix)
    prefix = [int(t) for t in prefix]
    check_schedule(prefix, terminated=False)
    rng = np.random.default_rng(params.seed)
    t0 = time.perf_counter()
    state = DecodeState(model, condition, params.cfg_scale)
    logits = state.prefill(prefix)[0, -1]
    tokens = list(prefix)
    limit = _token_limit(model, params, len(prefix))
    truncated = False
    while True:
        if len(tokens) >= limit:
            tokens.append(EOS_ID)
            truncated = True
            break
        tok = sample_next(logits, token_type_at(len(tokens)), params, rng)
        tokens.append(tok)
        if tok == EOS_ID:
            break
        logits = state.feed([tok])[0, -1]
    dt = time.perf_counter() - t0
    return GenerationResult(tokens, truncated, dt, len(tokens) - len(prefix))


def continue_from_prefix(model: AssetFormer, condition: Condition, prefix: Sequence[int],
                         params: SamplingParams) -> GenerationResult:
    """Inpainting-style editing: keep ``prefix`` verbatim and decode the rest."""
    return generate(model, condition, params, prefix)


# ---------------------------------------------------------------------------
# Beam search


def beam_core(
    score_next: Callable[[list[int] | None, list[int] | None], np.ndarray],
    width: int,
    is_final: Callable[[list[int]], bool],
) -> tuple[list[int], float, list[tuple[list[int], float]]]:
    """Length-normalised beam search over an abstract next-token scorer.

    ``score_next(None, None)`` returns the root log-probability row (1, V);
    ``score_next(parents, tokens)`` extends the given live hypotheses (by index
    into the previous live list) and returns one row per new live hypothesis.
    Invalid continuations carry -inf. At each step the ``width`` best
    continuations by summed log-probability survive; those that are final
    move to the finished pool. The result maximises mean per-token log-prob
    over the finished pool.
    """
    live: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[list[int], float]] = []
    logp = score_next(None, None)
    while live:
        cands = []
        for b, (_, s) in enumerate(live):
            row = logp[b]
            valid = np.flatnonzero(np.isfinite(row))
            if len(valid) > width:
                valid = valid[np.argsort(-row[valid], kind="stable")[:width]]
            cands.extend((s + row[t], b, int(t)) for t in valid)
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        new_live, parents, toks = [], [], []
        for s, b, t in cands[:width]:
            seq = live[b][0] + [t]
            if is_final(seq):
                finished.append((seq, s))
            else:
                new_live.append((seq, s))
                parents.append(b)
                toks.append(t)
        live = new_live
        if live:
            logp = score_next(parents, toks)
    best = max(finished, key=lambda f: (f[1] / len(f[0])))
    return best[0], best[1], finished


def _beam_row(logits: torch.Tensor, position: int, limit: int | None) -> np.ndarray:
    if limit is not None and position >= limit:
        row = np.full(VOCAB_SIZE, -np.inf)
        row[EOS_ID] = 0.0
        return row
    masked = type_mask(logits, token_type_at(position)).to(torch.float64)
    return torch.log_softmax(masked, dim=-1).numpy()


@torch.no_grad()
def sequence_logprob(model: AssetFormer, condition: Condition, tokens: Sequence[int],
                     cfg_scale: float | None, limit: int | None = None) -> float:
    """Summed log-prob of ``tokens`` under the masked, guided rows beam search scores with."""
    state = DecodeState(model, condition, cfg_scale)
    rows = state.prefill(list(tokens[:-1]))[0]
    return float(sum(_beam_row(rows[i], i, limit)[tok] for i, tok in enumerate(tokens)))


def beam_search(model: AssetFormer, condition: Condition, width: int, params: SamplingParams,
                prefix: Sequence[int] = ()) -> GenerationResult:
    prefix = [int(t) for t in prefix]
    check_schedule(prefix, terminated=False)
    t0 = time.perf_counter()
    limit = _token_limit(model, params, len(prefix))
    state = DecodeState(model, condition, params.cfg_scale)
    depth = len(prefix)

    def score_next(parents, toks):
        nonlocal depth
        if parents is None:
            logits = state.prefill(prefix)[:, -1]
        else:
            state.reorder(parents)
            logits = state.feed(torch.tensor(toks, dtype=torch.long).unsqueeze(1))[:, -1]
            depth += 1
        return np.stack([_beam_row(row, depth, limit) for row in logits])

    seq, _, _ = beam_core(score_next, width, lambda s: s[-1] == EOS_ID)
    tokens = prefix + seq
    truncated = len(tokens) - 1 >= limit
    return GenerationResult(tokens, truncated, time.perf_counter() - t0, len(seq))


# ---------------------------------------------------------------------------
# SlowFast (speculative) decoding


def accept_probability(p: np.ndarray, q: np.ndarray, token: int) -> float:
    """Probability that a drafted ``token`` survives: min(1, q/p)."""
    return min(1.0, q[token] / p[token])


def residual_distribution(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """normalize(max(0, q - p)); falls back to q when the residual vanishes."""
    r = np.maximum(q - p, 0.0)
    total = r.sum()
    if total <= 0.0:
        return q / q.sum()
    return r / total


def verify_drafts(
    p_rows: Sequence[np.ndarray],
    q_rows: Sequence[np.ndarray],
    drafted: Sequence[int],
    rng: np.random.Generator,
) -> tuple[int, int | None]:
    """Accept/reject scan over drafted tokens.

    ``q_rows`` has one more row than ``drafted`` (the bonus position). Both
    ``p_rows`` and ``q_rows`` are final sampling distributions for their
    slots, so they share support restrictions.

    Returns:
        (number accepted, corrective or bonus token). The second item is None
        when every draft was accepted and the last one was EOS.
    """
    for i, tok in enumerate(drafted):
        if rng.random() < accept_probability(p_rows[i], q_rows[i], tok):
            if tok == EOS_ID:
                return i + 1, None
            continue
        return i, draw(residual_distribution(p_rows[i], q_rows[i]), rng)
    return len(drafted), draw(q_rows[len(drafted)], rng)


@dataclass
class AcceptanceStats:
    proposed: dict = field(default_factory=lambda: {t.name: 0 for t in TokenType})
    accepted: dict = field(default_factory=lambda: {t.name: 0 for t in TokenType})
    draft_calls: int = 0
    target_calls: int = 0

    @property
    def acceptance_rate(self) -> float:
        total = sum(self.proposed.values())
        return sum(self.accepted.values()) / total if total else 1.0

    def per_slot(self) -> dict:
        return {k: (self.accepted[k] / v if v else None) for k, v in self.proposed.items()}

    def to_dict(self) -> dict:
        return {
            "acceptance_rate": self.acceptance_rate,
            "per_slot_acceptance": self.per_slot(),
            "proposed": sum(self.proposed.values()),
            "accepted": sum(self.accepted.values()),
            "draft_calls": self.draft_calls,
            "target_calls": self.target_calls,
        }


def check_pair(draft: AssetFormer, target: AssetFormer) -> None:
    for name in ("vocab_size", "phrase_vocab_size", "n_cond_slots"):
        if getattr(draft.cfg, name) != getattr(target.cfg, name):
            raise ValueError(f"draft and target disagree on {name}")


def slowfast_generate(
    draft: AssetFormer,
    target: AssetFormer,
    condition: Condition,
    params: SamplingParams,
    sf: SlowFastParams = SlowFastParams(),
    prefix: Sequence[int] = (),
) -> GenerationResult:
    """Speculative decoding with a draft model and a target model.

    The draft proposes up to K tokens; one target forward scores them all;
    drafts are accepted left to right with probability min(1, q/p); the first
    rejection is replaced by a draw from the type-restricted residual
    max(0, q - p); a clean sweep earns a bonus token from q. The emitted
    sequence is distributed exactly as target-only sampling with ``params``.
    """
    if params.strategy is Strategy.BEAM:
        raise ValueError("SlowFast decoding supports greedy and top-k strategies")
    check_pair(draft, target)
    prefix = [int(t) for t in prefix]
    check_schedule(prefix, terminated=False)
    rng = np.random.default_rng(params.seed)
    stats = AcceptanceStats()
    t0 = time.perf_counter()

    limit = min(_token_limit(draft, params, len(prefix)), _token_limit(target, params, len(prefix)))
    d_state = DecodeState(draft, condition, params.cfg_scale)
    t_state = DecodeState(target, condition, params.cfg_scale)
    d_last = d_state.prefill(prefix)[0, -1]
    q_next = t_state.prefill(prefix)[0, -1]
    stats.draft_calls += 1
    stats.target_calls += 1
    seq = list(prefix)
    truncated = False

    def dist(logits, pos):
        return token_probs(type_mask(logits, token_type_at(pos)), params)

    while True:
        n = len(seq)
        if n >= limit:
            seq.append(EOS_ID)
            truncated = True
            break
        k = min(sf.lookahead, limit - n)

        # draft catches up on tokens it has not seen, then proposes k tokens
        pending = seq[d_state.tokens_fed:]
        if pending:
            d_last = d_state.feed(pending)[0, -1]
            stats.draft_calls += 1
        drafted, p_rows = [], []
        for i in range(k):
            p = dist(d_last, n + i)
            tok = draw(p, rng)
            drafted.append(tok)
            p_rows.append(p)
            if tok == EOS_ID:
                break
            if i < k - 1:
                d_last = d_state.feed([tok])[0, -1]
                stats.draft_calls += 1

        # one target pass over unseen committed tokens plus all drafts
        catch_up = seq[t_state.tokens_fed:]
        feed = catch_up + drafted[:-1] if drafted[-1] == EOS_ID else catch_up + drafted
        q_logits = [q_next] if not catch_up else []
        if feed:
            out = t_state.feed(feed)[0]
            stats.target_calls += 1
            q_logits.extend(out[len(catch_up) - 1 if catch_up else 0:])
        q_rows = [dist(q_logits[i], n + i) for i in range(len(q_logits))]

        n_acc, extra = verify_drafts(p_rows, q_rows, drafted, rng)
        for i in range(len(drafted)):
            name = token_type_at(n + i).name
            stats.proposed[name] += 1
            if i < n_acc:
                stats.accepted[name] += 1
        seq.extend(drafted[:n_acc])
        if extra is None:
            break
        if len(seq) >= limit:
            # a bonus token would overrun the budget; EOS is forced next round
            continue
        seq.append(extra)
        if extra == EOS_ID:
            break

        # drop cache entries past the accepted prefix; the newest token stays unfed
        keep = n + n_acc
        t_state.rewind(min(t_state.tokens_fed, keep))
        d_state.rewind(min(d_state.tokens_fed, keep))

    dt = time.perf_counter() - t0
    return GenerationResult(seq, truncated, dt, len(seq) - len(prefix), stats.to_dict())
