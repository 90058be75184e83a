"""Schema graph, token-level BiLSTM node embeddings and the 2-layer GCN."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from .errors import EmptyNodeName, ShapeMismatch
from .schema import Schema, name_tokens

TABLE_NODE, COLUMN_NODE = "table", "column"
TABLE_COLUMN, FOREIGN_KEY = "table-column", "foreign-key"


@dataclass
class SchemaGraph:
    """Tables first, then one node per distinct column name."""

    nodes: list[tuple[str, str, list[str]]]  # (kind, name, tokens)
    edges: set[tuple[int, int, str]]
    merged_map: dict[str, list[tuple[str, str]]]
    n_tables: int

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def adjacency(self, dtype=torch.float32) -> torch.Tensor:
        a = torch.zeros(self.n_nodes, self.n_nodes, dtype=dtype)
        for i, j, _ in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a


def build_schema_graph(schema: Schema) -> SchemaGraph:
    nodes = [(TABLE_NODE, t, name_tokens(t)) for t in schema.table_names]
    nodes += [(COLUMN_NODE, c, name_tokens(c)) for c in schema.column_names]
    nt = schema.n_tables
    edges: set[tuple[int, int, str]] = set()
    for ti, t in enumerate(schema.tables):
        for c in t.columns:
            edges.add((ti, nt + schema.column_id(c.name), TABLE_COLUMN))
    for fk in schema.foreign_keys:
        a, b = nt + schema.column_id(fk.src_column), nt + schema.column_id(fk.dst_column)
        if a == b:
            # both endpoints merged into one column node: link the tables instead
            a, b = schema.table_id(fk.src_table), schema.table_id(fk.dst_table)
        if a != b:
            edges.add((min(a, b), max(a, b), FOREIGN_KEY))
    return SchemaGraph(nodes, edges, schema.merged_map, nt)


def normalized_adjacency(a: torch.Tensor) -> torch.Tensor:
    """``D^-1/2 (A + I) D^-1/2``."""
    a = a + torch.eye(a.shape[0], dtype=a.dtype)
    d = a.sum(1).rsqrt()
    return d[:, None] * a * d[None, :]


PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"


@dataclass
class Vocab:
    tokens: list[str] = field(default_factory=lambda: [PAD, UNK, BOS, EOS])

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def add(self, tok: str) -> int:
        if tok not in self.index:
            self.index[tok] = len(self.tokens)
            self.tokens.append(tok)
        return self.index[tok]

    def encode(self, toks) -> list[int]:
        return [self.index.get(t, 1) for t in toks]

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def build(cls, schemas, transcripts=(), values=()) -> "Vocab":
        v = cls()
        for s in schemas:
            for name in list(s.table_names) + list(s.column_names):
                for t in name_tokens(name):
                    v.add(t)
            for val in s.value_pool:
                for t in value_tokens(val):
                    v.add(t)
        for words in transcripts:
            for t in words:
                v.add(t)
        for val in values:
            for t in value_tokens(val):
                v.add(t)
        return v


def value_tokens(value: str) -> list[str]:
    toks = [t.lower() for t in str(value).replace("_", " ").split()]
    return toks or [str(value)]


@dataclass
class TokenEncoderConfig:
    vocab_size: int
    emb_dim: int = 128
    hidden: int = 512
    d_model: int = 512


class TokenEncoder(nn.Module):
    """Embedding -> BiLSTM -> FFN over the concatenated final states.

    Shared by schema nodes, candidate values and (during pre-training) the
    text autoencoder.
    """

    def __init__(self, cfg: TokenEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.emb_dim, padding_idx=0)
        self.lstm = nn.LSTM(cfg.emb_dim, cfg.hidden, batch_first=True, bidirectional=True)
        self.ffn = nn.Sequential(nn.Linear(2 * cfg.hidden, cfg.d_model), nn.ReLU(), nn.Linear(cfg.d_model, cfg.d_model))

    def run(self, ids: torch.Tensor, lengths: torch.Tensor):
        """Return (pooled (N, d_model), token states (N, L, 2*hidden))."""
        if (lengths < 1).any():
            raise EmptyNodeName("every sequence needs at least one token")
        packed = pack_padded_sequence(self.embed(ids), lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, (h, _) = self.lstm(packed)
        out, _ = torch.nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=ids.shape[1])
        final = torch.cat([h[0], h[1]], dim=-1)
        return self.ffn(final), out

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        return self.run(ids, lengths)[0]


def pad_token_ids(seqs: list[list[int]]):
    if any(len(s) == 0 for s in seqs):
        raise EmptyNodeName("empty token list")
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    ids = torch.zeros(len(seqs), int(lengths.max()) if seqs else 1, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s)
    return ids, lengths


def embed_nodes(g: SchemaGraph, vocab: Vocab, encoder: TokenEncoder) -> torch.Tensor:
    """``H_s`` with rows in ``g.nodes`` order."""
    for kind, name, toks in g.nodes:
        if not toks:
            raise EmptyNodeName(f"{kind} {name!r} has no name tokens")
    ids, lengths = pad_token_ids([vocab.encode(t) for _, _, t in g.nodes])
    return encoder(ids, lengths)


class GCN(nn.Module):
    """Two graph convolutions, ``Ā·ReLU(Ā·H·Θ1)·Θ2``, without bias."""

    def __init__(self, d_model: int):
        super().__init__()
        self.theta1 = nn.Linear(d_model, d_model, bias=False)
        self.theta2 = nn.Linear(d_model, d_model, bias=False)

    def forward(self, h: torch.Tensor, a_norm: torch.Tensor) -> torch.Tensor:
        if h.shape[-2] != a_norm.shape[-1]:
            raise ShapeMismatch(f"{h.shape[-2]} node rows but adjacency is {tuple(a_norm.shape)}")
        return a_norm @ self.theta2(torch.relu(a_norm @ self.theta1(h)))


class NodeRNN(nn.Module):
    """Graph-free alternative: a BiLSTM run over the node sequence."""

    def __init__(self, d_model: int):
        super().__init__()
        self.lstm = nn.LSTM(d_model, d_model // 2, batch_first=True, bidirectional=True)
        self.out = nn.Linear(2 * (d_model // 2), d_model)

    def forward(self, h: torch.Tensor, a_norm: torch.Tensor | None = None) -> torch.Tensor:
        return self.out(self.lstm(h.unsqueeze(0))[0][0])


def encode_graph(h_s: torch.Tensor, g: SchemaGraph, gcn: nn.Module) -> torch.Tensor:
    if h_s.shape[0] != g.n_nodes:
        raise ShapeMismatch(f"H_s has {h_s.shape[0]} rows for {g.n_nodes} nodes")
    return gcn(h_s, normalized_adjacency(g.adjacency(h_s.dtype)))
