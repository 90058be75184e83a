"""Speech-sentence pre-training (dual autoencoders + contrastive alignment) and
speech-item pre-training (does this column occur in the query?)."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import BatchTooSmall, EmptyExamples, MissingTranscripts
from .schema import name_tokens
from .schema_encoder import TokenEncoder, Vocab, pad_token_ids
from .semql.sqlparse import BoolOp, Cond, NotOp, parse_sql
from .speech_encoder import SpeechEncoder, collate_features

log = logging.getLogger(__name__)

SIPT_WIDTH = 32
PROB_CLAMP = 1e-7


# ---------------------------------------------------------------- autoencoder decoders


class SpeechDecoder(nn.Module):
    """Mirror of the CNN encoder: linear lift, then transposed convolutions."""

    def __init__(self, enc: SpeechEncoder):
        super().__init__()
        cfg = enc.cfg
        self.mel_bins = 96
        for b in range(1, cfg.n_blocks + 1):
            if b in cfg.mel_stride_blocks:
                self.mel_bins = math.ceil(self.mel_bins / 2)
        self.lift = nn.Linear(cfg.d_model, cfg.channels)
        layers = []
        for b in range(cfg.n_blocks, 0, -1):
            stride = (2 if b in cfg.time_stride_blocks else 1, 2 if b in cfg.mel_stride_blocks else 1)
            c_out = 1 if b == 1 else cfg.channels
            pad = (cfg.kernel[0] // 2, cfg.kernel[1] // 2)
            layers.append(nn.ConvTranspose2d(cfg.channels, c_out, cfg.kernel, stride=stride, padding=pad,
                                             output_padding=(stride[0] - 1, stride[1] - 1)))
        self.layers = nn.ModuleList(layers)

    def forward(self, z: torch.Tensor, n_frames: int) -> torch.Tensor:
        """(B, T', d) -> (B, n_frames, 96)."""
        x = self.lift(z).transpose(1, 2)[..., None].expand(-1, -1, -1, self.mel_bins)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x[:, 0, :n_frames, :96]


class TextDecoder(nn.Module):
    """LSTM that regenerates the transcript from the pooled text vector."""

    def __init__(self, vocab_size: int, emb_dim: int, d_model: int):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, emb_dim, padding_idx=0)
        self.init = nn.Linear(d_model, d_model)
        self.lstm = nn.LSTM(emb_dim, d_model, batch_first=True)
        self.out = nn.Linear(d_model, vocab_size)

    def forward(self, pooled, inputs):
        h0 = torch.tanh(self.init(pooled))[None]
        out, _ = self.lstm(self.embed(inputs), (h0, torch.zeros_like(h0)))
        return self.out(out)


class SIPTHead(nn.Module):
    def __init__(self, width: int = SIPT_WIDTH):
        super().__init__()
        self.w = nn.Linear(width, 1)

    def forward(self, v):
        return torch.sigmoid(self.w(v))[..., 0]


class Pretrainer(nn.Module):
    """Pre-training heads around a model's speech and token encoders (shared, not copied)."""

    def __init__(self, speech: SpeechEncoder, tokens: TokenEncoder):
        super().__init__()
        self.speech = speech
        self.tokens = tokens
        self.speech_dec = SpeechDecoder(speech)
        self.text_dec = TextDecoder(tokens.cfg.vocab_size, tokens.cfg.emb_dim, tokens.cfg.d_model)
        self.sipt = SIPTHead()


# ---------------------------------------------------------------- losses


@dataclass
class SSPTLoss:
    total: torch.Tensor
    L_a: torch.Tensor
    L_s: torch.Tensor
    L_p: torch.Tensor


def frame_kl(target: torch.Tensor, recon: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over valid frames of KL(softmax(target) || softmax(recon)) across mel bins."""
    logp = torch.log_softmax(target, dim=-1)
    logq = torch.log_softmax(recon, dim=-1)
    kl = (logp.exp() * (logp - logq)).sum(-1)
    return (kl * mask).sum() / mask.sum()


def contrastive_loss(h_a: torch.Tensor, h_s: torch.Tensor) -> torch.Tensor:
    """mean_b -log( exp(sim(b,b)) / sum_{i != b} exp(sim(b,i)) ) with cosine similarity."""
    n = h_a.shape[0]
    if n < 2:
        raise BatchTooSmall("the contrastive term needs at least two pairs")
    sim = F.cosine_similarity(h_a[:, None, :], h_s[None, :, :], dim=-1)
    off = ~torch.eye(n, dtype=torch.bool)
    denom = torch.logsumexp(sim.masked_fill(~off, float("-inf")), dim=1)
    return (denom - sim.diagonal()).mean()


def text_states(tokens: TokenEncoder, ids, lengths):
    """Pooled text vector and per-token states mapped to ``d_model`` by the node FFN."""
    pooled, states = tokens.run(ids, lengths)
    mask = (torch.arange(ids.shape[1])[None, :] < lengths[:, None]).to(pooled.dtype)
    per_token = tokens.ffn(states)
    mean = (per_token * mask[..., None]).sum(1) / mask.sum(1, keepdim=True)
    return pooled, mean


def sspt_loss(features, transcripts, pre: Pretrainer, vocab: Vocab) -> SSPTLoss:
    """Reconstruction of both modalities plus in-batch speech/text alignment."""
    if len(features) < 2:
        raise BatchTooSmall("the contrastive term needs at least two pairs")
    dtype = pre.speech.proj.weight.dtype
    x, lengths = collate_features(features, dtype)
    z_a, mask_a = pre.speech(x, lengths)
    recon = pre.speech_dec(z_a, x.shape[1])
    frames = (torch.arange(x.shape[1])[None, :] < lengths[:, None]).to(dtype)
    L_a = frame_kl(x, recon, frames)

    ids, tl = pad_token_ids([vocab.encode(t) for t in transcripts])
    pooled, h_s = text_states(pre.tokens, ids, tl)
    bos = torch.full((ids.shape[0], 1), 2, dtype=torch.long)
    inputs = torch.cat([bos, ids], dim=1)
    targets = torch.cat([ids, torch.zeros_like(bos)], dim=1)
    targets[torch.arange(ids.shape[0]), tl] = 3  # eos
    logits = pre.text_dec(pooled, inputs)
    # cross-entropy equals KL against the one-hot token distribution
    L_s = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=0)

    h_a = z_a.masked_fill(~mask_a[..., None], float("-inf")).max(dim=1).values
    L_p = contrastive_loss(h_a, h_s)
    return SSPTLoss(L_a + L_s + L_p, L_a, L_s, L_p)


@dataclass
class SIPTExample:
    features: object
    item: list[str]
    label: int
    column: str = ""


def gold_columns(instance, schema) -> list[int]:
    """Columns the gold query mentions: those selected by actions plus JOIN ... ON keys."""
    used = {a.index for a in instance.gold_actions if a.kind == "column"}
    for ref in _join_refs(parse_sql(instance.gold_sql)):
        cid = schema.column_id(ref.column)
        if cid is not None:
            used.add(cid)
    return sorted(used)


def _join_refs(query):
    for core in (query.left, query.right):
        if core is None:
            continue
        yield from core.join_columns
        stack = [core.where]
        while stack:
            node = stack.pop()
            if isinstance(node, BoolOp):
                stack.extend(node.items)
            elif isinstance(node, NotOp):
                stack.append(node.item)
            elif isinstance(node, Cond) and node.sub is not None:
                yield from _join_refs(node.sub)


def sipt_examples(instance, schema, n_negatives: int = 3, seed: int = 0) -> list[SIPTExample]:
    """One positive per column in the gold query plus sampled absent columns."""
    used = gold_columns(instance, schema)
    unused = [c for c in range(schema.n_columns) if c not in used]
    rng = random.Random(f"{seed}:{instance.id}")
    negs = rng.sample(unused, min(n_negatives, len(unused)))
    make = lambda c, y: SIPTExample(instance.features, name_tokens(schema.column_names[c]), y,  # noqa: E731
                                    schema.column_names[c])
    return [make(c, 1) for c in used] + [make(c, 0) for c in sorted(negs)]


def sipt_probs(examples, pre: Pretrainer, vocab: Vocab) -> torch.Tensor:
    dtype = pre.speech.proj.weight.dtype
    x, lengths = collate_features([e.features for e in examples], dtype)
    z_a, mask_a = pre.speech(x, lengths)
    ids, tl = pad_token_ids([vocab.encode(e.item) for e in examples])
    h_s = pre.tokens(ids, tl)
    cos = F.cosine_similarity(z_a, h_s[:, None, :], dim=-1)
    rows = []
    for i in range(len(examples)):
        valid = cos[i, : int(mask_a[i].sum())]
        rows.append(F.adaptive_avg_pool1d(valid[None, None, :], SIPT_WIDTH)[0, 0])
    return pre.sipt(torch.stack(rows))


def bce(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    p = probs.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -(labels * torch.log(p) + (1 - labels) * torch.log(1 - p)).mean()


def sipt_loss(examples, pre: Pretrainer, vocab: Vocab) -> torch.Tensor:
    if not examples:
        raise EmptyExamples("speech-item pre-training needs at least one example")
    probs = sipt_probs(examples, pre, vocab)
    labels = torch.tensor([float(e.label) for e in examples], dtype=probs.dtype)
    return bce(probs, labels)


# ---------------------------------------------------------------- training


@dataclass
class PretrainConfig:
    sspt_epochs: int = 20
    sipt_epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    n_negatives: int = 3
    no_sspt: bool = False
    no_sipt: bool = False
    clip_norm: float = 5.0


@dataclass
class PretrainResult:
    speech_state: dict
    text_state: dict
    trained: bool
    history: list[dict] = field(default_factory=list)


def _save(pre: Pretrainer, out: Path, stage: str, epoch: int, row: dict, opt, cfg: PretrainConfig, history):
    (out / "ckpt").mkdir(parents=True, exist_ok=True)
    path = out / "ckpt" / f"{stage}-{epoch}.bin"
    torch.save({"model": pre.state_dict(), "optim": opt.state_dict(), "rng": torch.get_rng_state()}, path)
    meta = {"stage": stage, "epoch": epoch, "loss": row, "config": asdict(cfg), "history": history}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))


def latest_checkpoint(out_dir, stage: str):
    d = Path(out_dir) / "ckpt"
    found = sorted(d.glob(f"{stage}-*.bin"), key=lambda p: int(p.stem.split("-")[1])) if d.exists() else []
    return found[-1] if found else None


def run_pretraining(instances, schemas, cfg: PretrainConfig, speech: SpeechEncoder, tokens: TokenEncoder,
                    vocab: Vocab, out_dir=None, resume: bool = False) -> PretrainResult:
    """Train the given encoders in place; returns their weights and the loss history."""
    torch.manual_seed(cfg.seed)
    if cfg.no_sspt and cfg.no_sipt:
        return PretrainResult(speech.state_dict(), tokens.state_dict(), False)
    pre = Pretrainer(speech, tokens)
    out = Path(out_dir) if out_dir else None
    history: list[dict] = []
    stages = []
    if not cfg.no_sspt:
        if any(i.transcript is None for i in instances):
            raise MissingTranscripts("speech-sentence pre-training needs a transcript for every instance")
        stages.append(("sspt", cfg.sspt_epochs))
    if not cfg.no_sipt:
        stages.append(("sipt", cfg.sipt_epochs))
    for stage, epochs in stages:
        opt = torch.optim.Adam(pre.parameters(), lr=cfg.lr)
        gen = torch.Generator().manual_seed(cfg.seed)
        start = 1
        if resume and out is not None and (ck := latest_checkpoint(out, stage)) is not None:
            state = torch.load(ck, map_location="cpu", weights_only=False)
            pre.load_state_dict(state["model"])
            opt.load_state_dict(state["optim"])
            torch.set_rng_state(state["rng"])
            meta = json.loads(ck.with_suffix(".json").read_text())
            history = meta["history"]
            start = meta["epoch"] + 1
            for _ in range(meta["epoch"]):
                torch.randperm(len(instances), generator=gen)
        if stage == "sipt":
            examples = [e for inst in instances
                        for e in sipt_examples(inst, schemas[inst.db_id], cfg.n_negatives, cfg.seed)]
        pre.train()
        for epoch in range(start, epochs + 1):
            pool = instances if stage == "sspt" else examples
            order = torch.randperm(len(pool), generator=gen).tolist()
            sums, n = {}, 0
            for b in range(0, len(order), cfg.batch_size):
                chunk = [pool[i] for i in order[b : b + cfg.batch_size]]
                if stage == "sspt":
                    if len(chunk) < 2:
                        continue
                    parts = sspt_loss([i.features for i in chunk], [i.transcript for i in chunk], pre, vocab)
                    loss = parts.total
                    vals = {"L": loss.item(), "L_a": parts.L_a.item(), "L_s": parts.L_s.item(), "L_p": parts.L_p.item()}
                else:
                    loss = sipt_loss(chunk, pre, vocab)
                    vals = {"L": loss.item()}
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(pre.parameters(), cfg.clip_norm)
                opt.step()
                for k, v in vals.items():
                    sums[k] = sums.get(k, 0.0) + v * len(chunk)
                n += len(chunk)
            row = {"stage": stage, "epoch": epoch} | {k: v / max(n, 1) for k, v in sums.items()}
            history.append(row)
            log.info("%s epoch %d %s", stage, epoch, row)
            if out is not None:
                _save(pre, out, stage, epoch, row, opt, cfg, history)
    pre.eval()
    return PretrainResult(speech.state_dict(), tokens.state_dict(), True, history)
