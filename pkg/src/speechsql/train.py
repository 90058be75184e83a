"""Fine-tuning loop, checkpointing and finite-difference gradient checks."""

from __future__ import annotations

import csv
import logging
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import GoldActionMasked, UnknownComponent
from .evaluation import query_match
from .fusion import FusionConfig
from .model import ModelConfig, SpeechSQLNet, save_model
from .schema_encoder import Vocab

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_decay: float = 0.8
    decay_patience: int = 2
    dropout: float = 0.3
    batch_size: int = 16
    max_epochs: int = 50
    seed: int = 0
    clip_norm: float = 5.0
    eval_every: int = 1
    # stop once validation accuracy reaches this value (None: run all epochs)
    target_acc: float | None = None
    freeze_text_encoder: bool = False
    no_gcn: bool | str = False
    no_linking: bool = False
    no_fusion: bool = False
    no_sspt: bool = False
    no_sipt: bool = False
    grammar: str | None = None
    d_model: int = 512
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 1024


def set_seed(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def model_config_from(config: TrainConfig) -> ModelConfig:
    """Full-size architecture with the sizes and ablation flags carried by ``config``."""
    return ModelConfig(d_model=config.d_model, lstm_hidden=config.d_model, dropout=config.dropout,
                       fusion=FusionConfig(config.n_layers, config.n_heads, config.d_ff, config.d_model),
                       no_gcn=config.no_gcn, no_linking=config.no_linking, no_fusion=config.no_fusion)


@dataclass
class Checkpoint:
    model: SpeechSQLNet
    epoch: int
    best_epoch: int
    best_acc: float
    history: list[dict] = field(default_factory=list)


def finetune_loss(instance, model: SpeechSQLNet, schemas: dict) -> torch.Tensor:
    """Teacher-forced negative log-likelihood of one gold action sequence."""
    return model.loss([instance], schemas)


def query_accuracy(model: SpeechSQLNet, instances, schemas, batch_size: int = 64) -> float:
    if not instances:
        return 0.0
    was = model.training
    model.eval()
    hits = 0
    for b in range(0, len(instances), batch_size):
        chunk = instances[b : b + batch_size]
        for inst, sql in zip(chunk, model.predict_sqls(chunk, schemas)):
            hits += bool(sql) and query_match(sql, inst.gold_sql, schemas[inst.db_id], model.grammar).exact
    model.train(was)
    return hits / len(instances)


def _prepare_all(model, instances, schemas):
    for inst in instances:
        try:
            model.prepare(inst, schemas[inst.db_id])
        except GoldActionMasked:
            raise
        except Exception as exc:  # surface the offending instance
            raise GoldActionMasked(f"instance {inst.id}: {exc}") from exc


def train_loop(train_set, val_set, schemas: dict, config: TrainConfig, model: SpeechSQLNet | None = None,
               model_config: ModelConfig | None = None, vocab: Vocab | None = None, out_dir=None,
               log_every: int = 0) -> Checkpoint:
    """Adam on shuffled mini-batches; keeps the parameters with the best validation accuracy."""
    if not train_set:
        raise ValueError("training set is empty")
    set_seed(config.seed)
    if model is None:
        if vocab is None:
            vocab = Vocab.build(schemas.values(), [i.transcript or [] for i in train_set],
                                [v for i in train_set for v in i.candidate_values])
        model = SpeechSQLNet(model_config or model_config_from(config), vocab)
    _prepare_all(model, train_set, schemas)
    params = [p for n, p in model.named_parameters()
              if not (config.freeze_text_encoder and n.startswith("tokens."))]
    opt = torch.optim.Adam(params, lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    out = Path(out_dir) if out_dir else None
    history, best_acc, best_epoch, best_state, stale = [], -1.0, 0, None, 0
    val = val_set if val_set else train_set
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = torch.randperm(len(train_set), generator=gen).tolist()
        total, n = 0.0, 0
        for b in range(0, len(order), config.batch_size):
            batch = [train_set[i] for i in order[b : b + config.batch_size]]
            loss = model.loss(batch, schemas)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, config.clip_norm)
            opt.step()
            total += loss.item() * len(batch)
            n += len(batch)
        row = {"epoch": epoch, "train_loss": total / n, "val_query_acc": float("nan")}
        evaluate_now = epoch % config.eval_every == 0 or epoch == config.max_epochs
        if evaluate_now:
            acc = query_accuracy(model, val, schemas)
            row["val_query_acc"] = acc
            if acc > best_acc:
                best_acc, best_epoch, stale = acc, epoch, 0
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            else:
                stale += 1
                if stale >= config.decay_patience:
                    for group in opt.param_groups:
                        group["lr"] *= config.lr_decay
                    stale = 0
        row["seconds"] = time.perf_counter() - t0
        history.append(row)
        if log_every and epoch % log_every == 0:
            log.info("epoch %d loss %.4f val_acc %s", epoch, row["train_loss"], row["val_query_acc"])
        if out is not None:
            _write_epoch(out, model, row, history, config, best_epoch == epoch and evaluate_now)
        if config.target_acc is not None and evaluate_now and best_acc >= config.target_acc:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return Checkpoint(model, epoch, best_epoch, best_acc, history)


def _write_epoch(out: Path, model, row, history, config, is_best):
    meta = {"epoch": row["epoch"], "train_loss": row["train_loss"], "val_query_acc": row["val_query_acc"],
            "train_config": asdict(config), "history": history}
    save_model(model, out / "ckpt" / f"{row['epoch']}.bin", meta)
    if is_best:
        save_model(model, out / "best.bin", meta)
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_query_acc", "seconds"])
        w.writeheader()
        w.writerows(history)


# ---------------------------------------------------------------- gradient checks


def finite_difference_check(params, loss_fn, eps: float = 1e-5, max_elements: int = 50, seed: int = 0) -> float:
    """Largest per-tensor relative error between autograd and central differences.

    Relative error of a tensor is ``max|a - n| / max(max|a|, max|n|, 1e-7)``.
    Tensors with more than ``max_elements`` entries are checked on a seeded
    random subset of entries.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if len(idx) > max_elements:
                idx = rng.choice(idx, max_elements, replace=False)
            ana, num = [], []
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                num.append((up - down) / (2 * eps))
                ana.append(g.view(-1)[i].item())
            ana, num = np.array(ana), np.array(num)
            denom = max(np.abs(ana).max(), np.abs(num).max(), 1e-7)
            worst = max(worst, float(np.abs(ana - num).max() / denom))
    return worst


COMPONENTS = ("speech_encoder", "schema_encoder", "fusion", "decoder", "sspt_loss", "sipt_loss")


def grad_check(component_id: str, toy_config: dict | None = None, eps: float = 1e-5) -> float:
    """Finite-difference check of one component on a small double-precision problem."""
    from . import gradcheck_toys

    if component_id not in COMPONENTS:
        raise UnknownComponent(f"{component_id!r}; expected one of {', '.join(COMPONENTS)}")
    params, loss_fn = gradcheck_toys.TOYS[component_id](**(toy_config or {}))
    return finite_difference_check(params, loss_fn, eps)
