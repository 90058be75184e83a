"""Small double-precision problems for ``train.grad_check``.

Each builder returns ``(parameters, loss_fn)`` where ``loss_fn`` is a
deterministic scalar function of the parameters (dropout disabled).
"""

from __future__ import annotations

import torch

from .decoder import Decoder, DecoderConfig, collate_plans, plan_gold, teacher_forced_nll
from .features import SpeechFeatures
from .fusion import Fusion, FusionConfig, apply_linking, link_scores
from .pretrain import Pretrainer, SIPTExample, sipt_loss, sspt_loss
from .schema import Column, ForeignKey, Schema, Table
from .schema_encoder import GCN, TokenEncoder, TokenEncoderConfig, Vocab, build_schema_graph, normalized_adjacency, pad_token_ids
from .semql import default_grammar, sql_to_actions
from .speech_encoder import SpeechEncoder, SpeechEncoderConfig, collate_features

D = torch.float64


def _toy_schema() -> Schema:
    return Schema("toy", (Table("team", (Column("name"), Column("wins", "number"), Column("city_id", "number"))),
                          Table("city", (Column("city_id", "number"), Column("city_name")))),
                  foreign_keys=(ForeignKey("team", "city_id", "city", "city_id"),))


def _toy_speech(d_model=4, seed=0):
    torch.manual_seed(seed)
    cfg = SpeechEncoderConfig(n_blocks=2, channels=3, time_stride_blocks=(2,), mel_stride_blocks=(1, 2),
                              d_model=d_model)
    return SpeechEncoder(cfg).to(D).train()


def _feats(lengths, seed=1):
    g = torch.Generator().manual_seed(seed)
    return [SpeechFeatures(torch.randn(n, 96, generator=g, dtype=D).numpy()) for n in lengths]


def speech_encoder(seed: int = 0):
    enc = _toy_speech(seed=seed)
    x, lengths = collate_features(_feats([6, 4]), D)
    w = torch.randn(2, 3, 4, generator=torch.Generator().manual_seed(seed + 5), dtype=D)

    def loss():
        z, mask = enc(x, lengths)
        return (z * w[:, : z.shape[1]] * mask[..., None]).sum()

    return list(enc.parameters()), loss


def _toy_tokens(vocab, d_model=4, seed=0):
    torch.manual_seed(seed)
    return TokenEncoder(TokenEncoderConfig(len(vocab), emb_dim=3, hidden=3, d_model=d_model)).to(D)


def schema_encoder(seed: int = 0):
    s = _toy_schema()
    vocab = Vocab.build([s])
    tok = _toy_tokens(vocab, seed=seed)
    gcn = GCN(4).to(D)
    g = build_schema_graph(s)
    ids, lengths = pad_token_ids([vocab.encode(t) for _, _, t in g.nodes])
    a = normalized_adjacency(g.adjacency(D))
    w = torch.randn(g.n_nodes, 4, generator=torch.Generator().manual_seed(seed + 3), dtype=D)

    def loss():
        return (gcn(tok(ids, lengths), a) * w).sum()

    return list(tok.parameters()) + list(gcn.parameters()), loss


def fusion(seed: int = 0):
    torch.manual_seed(seed)
    f = Fusion(FusionConfig(n_layers=1, n_heads=2, d_ff=6, d_model=8, dropout=0.0)).to(D)
    g = torch.Generator().manual_seed(seed + 1)
    z_a = torch.randn(2, 5, 8, generator=g, dtype=D)
    z_s = torch.randn(2, 3, 8, generator=g, dtype=D)
    mask_a = torch.tensor([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=torch.bool)
    mask_s = torch.tensor([[1, 1, 1], [1, 1, 0]], dtype=torch.bool)
    wa = torch.randn(2, 5, 8, generator=g, dtype=D) * mask_a[..., None]
    ws = torch.randn(2, 3, 8, generator=g, dtype=D) * mask_s[..., None]

    def loss():
        linked = apply_linking(z_a, z_s, link_scores(z_a, z_s, mask_s))
        out_a, out_s = f(linked, mask_a, z_s, mask_s)
        return (out_a * wa).sum() + (out_s * ws).sum()

    return list(f.parameters()), loss


def decoder(seed: int = 0):
    torch.manual_seed(seed)
    grammar = default_grammar()
    s = _toy_schema()
    dec = Decoder(DecoderConfig(grammar.n_rules, d_model=4, d_action=3, d_type=3, dropout=0.0)).to(D)
    seq = sql_to_actions("SELECT MAX(wins) FROM team WHERE wins > 3", s, grammar, ["2", "3"])
    plan = plan_gold(seq, s, grammar, dec.cfg)
    g = torch.Generator().manual_seed(seed + 1)
    n_nodes = s.n_tables + s.n_columns
    z_a = torch.randn(1, 3, 4, generator=g, dtype=D)
    mask_a = torch.ones(1, 3, dtype=torch.bool)
    z_nodes = torch.randn(1, n_nodes, 4, generator=g, dtype=D)
    z_vals = torch.randn(1, 2, 4, generator=g, dtype=D)
    tensors = collate_plans([plan], grammar.n_rules, n_nodes, 2)

    def loss():
        return teacher_forced_nll(dec, z_a, mask_a, z_nodes, z_vals, *tensors).sum()

    return list(dec.parameters()), loss


def _toy_pretrainer(seed):
    s = _toy_schema()
    transcripts = [["show", "the", "wins"], ["which", "city", "name"], ["team", "name"]]
    vocab = Vocab.build([s], transcripts)
    pre = Pretrainer(_toy_speech(seed=seed), _toy_tokens(vocab, seed=seed)).to(D).train()
    return pre, vocab, transcripts


def sspt_loss_toy(seed: int = 0):
    pre, vocab, transcripts = _toy_pretrainer(seed)
    feats = _feats([6, 4, 5], seed + 2)

    def loss():
        return sspt_loss(feats, transcripts, pre, vocab).total

    return list(pre.parameters()), loss


def sipt_loss_toy(seed: int = 0):
    pre, vocab, _ = _toy_pretrainer(seed)
    feats = _feats([6, 4, 5], seed + 2)
    examples = [SIPTExample(feats[0], ["wins"], 1), SIPTExample(feats[1], ["city", "name"], 0),
                SIPTExample(feats[2], ["name"], 1)]

    def loss():
        return sipt_loss(examples, pre, vocab)

    return [p for n, p in pre.named_parameters() if not n.startswith(("speech_dec", "text_dec"))], loss


TOYS = {
    "speech_encoder": speech_encoder,
    "schema_encoder": schema_encoder,
    "fusion": fusion,
    "decoder": decoder,
    "sspt_loss": sspt_loss_toy,
    "sipt_loss": sipt_loss_toy,
}
