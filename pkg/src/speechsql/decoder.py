"""Grammar-guided LSTM decoder with rule softmax and schema/value pointers.

Scores for every action family live in one "unified" vector per step,
``[rules | schema nodes (tables, then columns) | candidate values]``; the
legality mask of a step only ever opens one family, so a masked softmax
over the unified vector equals the per-family softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import CompleteDerivation, EmptyEmbedding, GoldActionMasked, MaxStepsExceeded
from .semql.grammar import NONTERMINALS, Grammar
from .semql.tree import COLUMN, RULE, TABLE, VALUE, Action, ActionSequence, DerivationState

FAMILY_ROW = {COLUMN: 0, TABLE: 1, VALUE: 2}
KIND_ID = {RULE: 0, COLUMN: 1, TABLE: 2, VALUE: 3}
SYMBOL_ID = {s: i for i, s in enumerate(NONTERMINALS)}


@dataclass
class DecoderConfig:
    n_rules: int
    d_model: int = 512
    d_action: int = 12
    d_type: int = 12
    dropout: float = 0.3
    # tanh-squash rule logits into [-1, 1]; False gives plain linear logits
    bounded_rule_logits: bool = True


class Decoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.start_row = cfg.n_rules + 3
        self.action_embed = nn.Embedding(cfg.n_rules + 4, cfg.d_action)
        self.type_embed = nn.Embedding(len(NONTERMINALS), cfg.d_type)
        self.cell = nn.LSTMCell(cfg.d_action + cfg.d_type + d, d)
        self.w_a = nn.Linear(d, d, bias=False)
        self.w_u = nn.Linear(2 * d, d)
        self.w_p = nn.Linear(d, cfg.n_rules)
        self.w_s = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)
        self.drop = nn.Dropout(cfg.dropout)

    def action_row(self, a: Action) -> int:
        return a.index if a.kind == RULE else self.cfg.n_rules + FAMILY_ROW[a.kind]

    def initial(self, z_a: torch.Tensor, mask_a: torch.Tensor):
        """h_0 = max over valid speech rows; cell and context start at zero."""
        if z_a.shape[1] == 0 or not mask_a.any(dim=1).all():
            raise EmptyEmbedding("speech embedding has no rows")
        h = z_a.masked_fill(~mask_a[..., None], float("-inf")).max(dim=1).values
        zeros = torch.zeros_like(h)
        return h, zeros, zeros

    def advance(self, prev_rows, symbols, h, cell, ctx, z_a, mask_a):
        """One recurrent step; returns (h, cell, context, u)."""
        x = torch.cat([self.action_embed(prev_rows), self.type_embed(symbols), ctx], dim=-1)
        h, cell = self.cell(x, (h, cell))
        scores = torch.einsum("bd,bld->bl", self.w_a(h), z_a).masked_fill(~mask_a, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = torch.einsum("bl,bld->bd", attn, z_a)
        u = torch.tanh(self.w_u(torch.cat([h, ctx], dim=-1)))
        return h, cell, ctx, self.drop(u)

    def unified_scores(self, u, z_nodes, z_vals):
        """u (..., d) with z_nodes (B, Ln, d), z_vals (B, Lv, d) -> (..., R + Ln + Lv)."""
        rules = self.w_p(u)
        if self.cfg.bounded_rule_logits:
            rules = torch.tanh(rules)
        if u.dim() == 2:
            nodes = torch.einsum("bd,bnd->bn", self.w_s(u), z_nodes)
            vals = torch.einsum("bd,bnd->bn", self.w_v(u), z_vals)
        else:
            nodes = torch.einsum("btd,bnd->btn", self.w_s(u), z_nodes)
            vals = torch.einsum("btd,bnd->btn", self.w_v(u), z_vals)
        return torch.cat([rules, nodes, vals], dim=-1)


# ---------------------------------------------------------------- teacher forcing plans


@dataclass
class StepPlan:
    """Per-step teacher-forcing targets of one gold sequence (schema-local indices)."""

    kinds: list[int]
    gold: list[int]
    prev_rows: list[int]
    symbols: list[int]
    legal: list[list[int]]
    n_tables: int


def plan_gold(seq: ActionSequence, schema, grammar: Grammar, decoder_cfg: DecoderConfig,
              max_steps: int | None = 40, instance_id: str = "?") -> StepPlan:
    st = DerivationState(grammar, schema, len(seq.values), max_steps)
    kinds, gold, prev, symbols, legal = [], [], [], [], []
    prev_row = decoder_cfg.n_rules + 3
    for i, a in enumerate(seq):
        kind = st.frontier_kind
        idx = st.legal_indices()
        if kind != a.kind or a.index not in idx:
            raise GoldActionMasked(f"instance {instance_id}: gold action {a} at step {i} is masked")
        kinds.append(KIND_ID[kind])
        gold.append(a.index)
        prev.append(prev_row)
        symbols.append(SYMBOL_ID[st.frontier_symbol])
        legal.append(idx)
        st.apply(a)
        prev_row = a.index if a.kind == RULE else decoder_cfg.n_rules + FAMILY_ROW[a.kind]
    return StepPlan(kinds, gold, prev, symbols, legal, schema.n_tables)


def unified_index(kind: int, local: int, n_rules: int, n_tables: int, n_nodes_max: int) -> int:
    if kind == 0:
        return local
    if kind == 1:
        return n_rules + n_tables + local
    if kind == 2:
        return n_rules + local
    return n_rules + n_nodes_max + local


def collate_plans(plans: list[StepPlan], n_rules: int, n_nodes_max: int, n_vals_max: int):
    """Tensors (B, T): prev rows, symbols, gold unified index, step mask; and (B, T, U) legality."""
    b, t = len(plans), max(len(p.kinds) for p in plans)
    width = n_rules + n_nodes_max + n_vals_max
    prev = torch.zeros(b, t, dtype=torch.long)
    sym = torch.zeros(b, t, dtype=torch.long)
    gold = torch.zeros(b, t, dtype=torch.long)
    steps = torch.zeros(b, t, dtype=torch.bool)
    legal = np.zeros((b, t, width), dtype=bool)
    for i, p in enumerate(plans):
        n = len(p.kinds)
        prev[i, :n] = torch.tensor(p.prev_rows)
        sym[i, :n] = torch.tensor(p.symbols)
        steps[i, :n] = True
        for j in range(n):
            k = p.kinds[j]
            gold[i, j] = unified_index(k, p.gold[j], n_rules, p.n_tables, n_nodes_max)
            legal[i, j, [unified_index(k, x, n_rules, p.n_tables, n_nodes_max) for x in p.legal[j]]] = True
    return prev, sym, gold, steps, torch.from_numpy(legal)


def teacher_forced_nll(dec: Decoder, z_a, mask_a, z_nodes, z_vals, prev, sym, gold, steps, legal):
    """Summed negative log-likelihood of each gold sequence, shape (B,)."""
    h, cell, ctx = dec.initial(z_a, mask_a)
    us = []
    for t in range(prev.shape[1]):
        h, cell, ctx, u = dec.advance(prev[:, t], sym[:, t], h, cell, ctx, z_a, mask_a)
        us.append(u)
    scores = dec.unified_scores(torch.stack(us, dim=1), z_nodes, z_vals)
    logp = torch.log_softmax(scores.masked_fill(~legal, float("-inf")), dim=-1)
    picked = logp.gather(-1, gold[..., None])[..., 0]
    return -(picked.masked_fill(~steps, 0.0)).sum(dim=1)


# ---------------------------------------------------------------- step-wise API


@dataclass
class DecoderState:
    h: torch.Tensor
    cell: torch.Tensor
    context: torch.Tensor
    derivation: DerivationState
    prev_row: int
    history: list[Action] = field(default_factory=list)


@dataclass
class ActionDistribution:
    """Probabilities over the flat action space of ``legal_actions`` (rules, columns, tables, values)."""

    probs: np.ndarray
    legal: np.ndarray


def init_state(dec: Decoder, z_a: torch.Tensor, schema, grammar: Grammar, n_values: int,
               max_steps: int | None = 40) -> DecoderState:
    if z_a.dim() != 2 or z_a.shape[0] == 0:
        raise EmptyEmbedding("speech embedding has no rows")
    h, cell, ctx = dec.initial(z_a[None], torch.ones(1, z_a.shape[0], dtype=torch.bool))
    return DecoderState(h, cell, ctx, DerivationState(grammar, schema, n_values, max_steps), dec.start_row)


def _flat_from_unified(scores: torch.Tensor, st: DerivationState, n_rules: int) -> torch.Tensor:
    """Reorder unified scores [rules | tables, columns | values] into [rules | columns | tables | values]."""
    nt, nc = st.schema.n_tables, st.schema.n_columns
    return torch.cat([scores[:n_rules], scores[n_rules + nt : n_rules + nt + nc],
                      scores[n_rules : n_rules + nt], scores[n_rules + nt + nc :]])


def step(dec: Decoder, state: DecoderState, z_a: torch.Tensor, z_nodes: torch.Tensor, z_vals: torch.Tensor):
    """Advance one step; returns (new state, distribution). Does not pick an action."""
    st = state.derivation
    if st.complete:
        raise CompleteDerivation("derivation is already complete")
    mask_a = torch.ones(1, z_a.shape[0], dtype=torch.bool)
    prev = torch.tensor([state.prev_row])
    sym = torch.tensor([SYMBOL_ID[st.frontier_symbol]])
    h, cell, ctx, u = dec.advance(prev, sym, state.h, state.cell, state.context, z_a[None], mask_a)
    scores = dec.unified_scores(u, z_nodes[None], z_vals[None])[0]
    flat = _flat_from_unified(scores, st, dec.cfg.n_rules)
    legal = torch.from_numpy(st.legal_mask())
    probs = torch.softmax(flat.masked_fill(~legal, float("-inf")), dim=-1)
    new = DecoderState(h, cell, ctx, st, state.prev_row, list(state.history))
    return new, ActionDistribution(probs.detach().numpy().astype(np.float64), legal.numpy())


def take(dec: Decoder, state: DecoderState, action: Action) -> DecoderState:
    state.derivation.apply(action)
    state.prev_row = dec.action_row(action)
    state.history.append(action)
    return state


@torch.no_grad()
def decode_greedy(dec: Decoder, z_a, z_nodes, schema, grammar: Grammar, z_vals, values=(),
                  max_steps: int = 40) -> ActionSequence:
    state = init_state(dec, z_a, schema, grammar, z_vals.shape[0], max_steps)
    while not state.derivation.complete:
        if state.derivation.steps >= max_steps:
            raise MaxStepsExceeded(f"derivation incomplete after {max_steps} steps")
        state, dist = step(dec, state, z_a, z_nodes, z_vals)
        state = take(dec, state, state.derivation.space.unflat(int(np.argmax(dist.probs))))
    return ActionSequence(tuple(state.history), tuple(values))


@torch.no_grad()
def decode_greedy_batch(dec: Decoder, z_a, mask_a, z_nodes, z_vals, schemas, grammar: Grammar, n_values,
                        max_steps: int = 40, generator: torch.Generator | None = None) -> list[list[Action] | None]:
    """Greedy decoding of a padded batch; ``None`` marks a derivation that hit the cap.

    With a ``generator`` each action is sampled from the masked distribution
    instead of taken by argmax.
    """
    b = z_a.shape[0]
    n_rules = dec.cfg.n_rules
    n_nodes_max = z_nodes.shape[1]
    states = [DerivationState(grammar, s, n, max_steps) for s, n in zip(schemas, n_values)]
    h, cell, ctx = dec.initial(z_a, mask_a)
    prev = torch.full((b,), dec.start_row, dtype=torch.long)
    width = n_rules + n_nodes_max + z_vals.shape[1]
    for _ in range(max_steps):
        active = [i for i, s in enumerate(states) if not s.complete]
        if not active:
            break
        sym = torch.tensor([SYMBOL_ID[s.frontier_symbol] if not s.complete else 0 for s in states])
        h, cell, ctx, u = dec.advance(prev, sym, h, cell, ctx, z_a, mask_a)
        scores = dec.unified_scores(u, z_nodes, z_vals)
        legal = np.zeros((b, width), dtype=bool)
        for i in active:
            s = states[i]
            k = KIND_ID[s.frontier_kind]
            legal[i, [unified_index(k, x, n_rules, s.schema.n_tables, n_nodes_max) for x in s.legal_indices()]] = True
        masked = scores.masked_fill(~torch.from_numpy(legal), float("-inf"))
        if generator is None:
            best = masked.argmax(dim=-1).tolist()
        else:
            probs = torch.softmax(masked[active], dim=-1)
            picks = torch.multinomial(probs, 1, generator=generator)[:, 0].tolist()
            best = dict(zip(active, picks))
        for i in active:
            s = states[i]
            kind = s.frontier_kind
            j = best[i]
            if kind == RULE:
                a = Action(RULE, j)
            elif kind == COLUMN:
                a = Action(COLUMN, j - n_rules - s.schema.n_tables)
            elif kind == TABLE:
                a = Action(TABLE, j - n_rules)
            else:
                a = Action(VALUE, j - n_rules - n_nodes_max)
            s.apply(a)
            prev[i] = dec.action_row(a)
    return [s.actions if s.complete else None for s in states]
