"""The full speech-to-SQL network: encoders, linking, fusion and decoder."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn

from .decoder import Decoder, DecoderConfig, collate_plans, decode_greedy_batch, plan_gold, teacher_forced_nll
from .errors import CheckpointMismatch, MaxStepsExceeded
from .fusion import Fusion, FusionConfig, apply_linking, link_scores
from .schema_encoder import (
    GCN,
    NodeRNN,
    TokenEncoder,
    TokenEncoderConfig,
    Vocab,
    build_schema_graph,
    normalized_adjacency,
    pad_token_ids,
    value_tokens,
)
from .semql import actions_to_sql, default_grammar
from .semql.grammar import Grammar
from .speech_encoder import SpeechEncoder, SpeechEncoderConfig, collate_features


@dataclass
class ModelConfig:
    d_model: int = 512
    speech: SpeechEncoderConfig = field(default_factory=SpeechEncoderConfig)
    emb_dim: int = 128
    lstm_hidden: int = 512
    fusion: FusionConfig = field(default_factory=FusionConfig)
    d_action: int = 12
    d_type: int = 12
    dropout: float = 0.3
    max_steps: int = 40
    # ablations: no_gcn is False, "identity" or "rnn"
    no_gcn: bool | str = False
    no_linking: bool = False
    no_fusion: bool = False
    # False swaps the tanh-bounded rule logits for plain linear ones
    bounded_rule_logits: bool = True

    def __post_init__(self):
        if isinstance(self.speech, dict):
            self.speech = SpeechEncoderConfig(**self.speech)
        if isinstance(self.fusion, dict):
            self.fusion = FusionConfig(**self.fusion)
        self.speech.d_model = self.d_model
        self.fusion.d_model = self.d_model
        self.fusion.dropout = self.dropout
        if self.no_gcn is True:
            self.no_gcn = "identity"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def desk_config(d_model: int = 128, **overrides) -> ModelConfig:
    """Laptop-sized configuration used by the acceptance runs."""
    base = dict(
        d_model=d_model,
        speech=SpeechEncoderConfig(n_blocks=6, channels=64, time_stride_blocks=(2, 4), mel_stride_blocks=(1, 2, 3, 4),
                                   d_model=d_model),
        emb_dim=64,
        lstm_hidden=d_model,
        fusion=FusionConfig(n_layers=2, n_heads=4, d_ff=2 * d_model, d_model=d_model),
        dropout=0.1,
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class Prepared:
    """Model-ready view of an instance, cached across epochs."""

    id: str
    db_id: str
    features: object
    plan: object
    value_ids: list[list[int]]


class SpeechSQLNet(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocab, grammar: Grammar | None = None):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.grammar = grammar or default_grammar()
        d = cfg.d_model
        self.speech = SpeechEncoder(cfg.speech)
        self.tokens = TokenEncoder(TokenEncoderConfig(len(vocab), cfg.emb_dim, cfg.lstm_hidden, d))
        if cfg.no_gcn == "rnn":
            self.graph = NodeRNN(d)
        elif cfg.no_gcn:
            self.graph = None
        else:
            self.graph = GCN(d)
        self.fusion = None if cfg.no_fusion else Fusion(cfg.fusion)
        self.decoder = Decoder(DecoderConfig(self.grammar.n_rules, d, cfg.d_action, cfg.d_type, cfg.dropout,
                                                  cfg.bounded_rule_logits))
        self._graphs: dict[str, tuple] = {}
        self._prepared: dict[tuple, Prepared] = {}

    @property
    def dtype(self):
        return self.decoder.w_a.weight.dtype

    # -------------------------------------------------------------- data plumbing

    def _graph(self, schema):
        key = schema.db_id
        if key not in self._graphs:
            g = build_schema_graph(schema)
            ids, lengths = pad_token_ids([self.vocab.encode(t) for _, _, t in g.nodes])
            self._graphs[key] = (ids, lengths, normalized_adjacency(g.adjacency(torch.float64)))
        return self._graphs[key]

    def prepare(self, inst, schema) -> Prepared:
        key = (inst.id, inst.db_id, tuple(inst.candidate_values))
        p = self._prepared.get(key)
        if p is None:
            plan = plan_gold(inst.gold_actions, schema, self.grammar, self.decoder.cfg, self.cfg.max_steps, inst.id)
            vids = [self.vocab.encode(value_tokens(v)) for v in inst.candidate_values]
            p = self._prepared[key] = Prepared(inst.id, inst.db_id, inst.features, plan, vids)
        return p

    # -------------------------------------------------------------- encoding

    def encode_schemas(self, schemas):
        """Node embeddings per distinct schema -> padded (B, Ln, d) and mask."""
        uniq = list({s.db_id: s for s in schemas}.values())
        graphs = [self._graph(s) for s in uniq]
        seqs = [ids[i, : int(lengths[i])].tolist() for ids, lengths, _ in graphs for i in range(len(lengths))]
        h_all = self.tokens(*pad_token_ids(seqs))
        per, k = {}, 0
        for s, (ids, _, a_norm) in zip(uniq, graphs):
            h = h_all[k : k + len(ids)]
            k += len(ids)
            if self.graph is not None:
                h = self.graph(h, a_norm.to(h.dtype))
            per[s.db_id] = h
        ln = max(per[s.db_id].shape[0] for s in schemas)
        z = h_all.new_zeros(len(schemas), ln, self.cfg.d_model)
        mask = torch.zeros(len(schemas), ln, dtype=torch.bool)
        for i, s in enumerate(schemas):
            n = per[s.db_id].shape[0]
            z[i, :n] = per[s.db_id]
            mask[i, :n] = True
        return z, mask

    def encode_values(self, value_ids: list[list[list[int]]]):
        lv = max([len(v) for v in value_ids] + [0])
        z = torch.zeros(len(value_ids), lv, self.cfg.d_model, dtype=self.dtype)
        mask = torch.zeros(len(value_ids), lv, dtype=torch.bool)
        flat = [t for v in value_ids for t in v]
        if flat:
            emb = self.tokens(*pad_token_ids(flat))
            k = 0
            for i, v in enumerate(value_ids):
                if v:
                    z = z.index_put((torch.full((len(v),), i), torch.arange(len(v))), emb[k : k + len(v)])
                    mask[i, : len(v)] = True
                k += len(v)
        return z, mask

    def encode(self, feats, lengths, schemas, value_ids):
        z_a, mask_a = self.speech(feats, lengths)
        z_s, mask_s = self.encode_schemas(schemas)
        z_v, mask_v = self.encode_values(value_ids)
        if not self.cfg.no_linking:
            z_a = apply_linking(z_a, z_s, link_scores(z_a, z_s, mask_s))
        if self.fusion is not None:
            z_a, z_s = self.fusion(z_a, mask_a, z_s, mask_s)
        return z_a, mask_a, z_s, mask_s, z_v, mask_v

    def _inputs(self, prepared: list[Prepared], schemas):
        feats, lengths = collate_features([p.features for p in prepared], self.dtype)
        return self.encode(feats, lengths, schemas, [p.value_ids for p in prepared])

    # -------------------------------------------------------------- objectives / inference

    def nll(self, prepared: list[Prepared], schemas) -> torch.Tensor:
        """Per-instance teacher-forced negative log-likelihood, shape (B,)."""
        z_a, mask_a, z_s, _, z_v, _ = self._inputs(prepared, schemas)
        tensors = collate_plans([p.plan for p in prepared], self.grammar.n_rules, z_s.shape[1], z_v.shape[1])
        return teacher_forced_nll(self.decoder, z_a, mask_a, z_s, z_v, *tensors)

    def loss(self, instances, schemas: dict) -> torch.Tensor:
        sch = [schemas[i.db_id] for i in instances]
        prepared = [self.prepare(i, s) for i, s in zip(instances, sch)]
        return self.nll(prepared, sch).mean()

    @torch.no_grad()
    def predict_actions(self, instances, schemas: dict, max_steps: int | None = None):
        sch = [schemas[i.db_id] for i in instances]
        vids = [[self.vocab.encode(value_tokens(v)) for v in i.candidate_values] for i in instances]
        feats, lengths = collate_features([i.features for i in instances], self.dtype)
        z_a, mask_a, z_s, _, z_v, _ = self.encode(feats, lengths, sch, vids)
        return decode_greedy_batch(self.decoder, z_a, mask_a, z_s, z_v, sch, self.grammar,
                                   [len(i.candidate_values) for i in instances], max_steps or self.cfg.max_steps)

    @torch.no_grad()
    def predict_sqls(self, instances, schemas: dict, max_steps: int | None = None) -> list[str]:
        out = []
        for inst, acts in zip(instances, self.predict_actions(instances, schemas, max_steps)):
            out.append("" if acts is None else
                       actions_to_sql(acts, schemas[inst.db_id], self.grammar, inst.candidate_values))
        return out

    @torch.no_grad()
    def predict_sql(self, inst, schema, max_steps: int | None = None) -> str:
        acts = self.predict_actions([inst], {inst.db_id: schema}, max_steps)[0]
        if acts is None:
            raise MaxStepsExceeded(f"{inst.id}: derivation incomplete after {max_steps or self.cfg.max_steps} steps")
        return actions_to_sql(acts, schema, self.grammar, inst.candidate_values)


# ---------------------------------------------------------------- checkpoints


def save_model(model: SpeechSQLNet, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    meta = {"config": model.cfg.to_dict(), "vocab": model.vocab.tokens,
            "grammar": [str(p) for p in model.grammar.productions]}
    meta.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))


def load_model(path, grammar: Grammar | None = None) -> tuple[SpeechSQLNet, dict]:
    path = Path(path)
    try:
        meta = json.loads(path.with_suffix(".json").read_text())
        state = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, ValueError, RuntimeError) as exc:
        raise CheckpointMismatch(f"{path}: cannot read checkpoint ({exc})") from exc
    grammar = grammar or default_grammar()
    if meta.get("grammar") and meta["grammar"] != [str(p) for p in grammar.productions]:
        raise CheckpointMismatch(f"{path}: checkpoint was trained with a different grammar")
    model = SpeechSQLNet(ModelConfig.from_dict(meta["config"]), Vocab(list(meta["vocab"])), grammar)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointMismatch(f"{path}: {exc}") from exc
    model.eval()
    return model, meta
