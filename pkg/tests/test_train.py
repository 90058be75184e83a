import dataclasses
import math

import pytest
import torch

from speechsql.dataset import build_instance
from speechsql.decoder import collate_plans
from speechsql.errors import GoldActionMasked, UnknownComponent
from speechsql.model import SpeechSQLNet, desk_config, load_model, save_model
from speechsql.pretrain import PretrainConfig, run_pretraining
from speechsql.schema_encoder import Vocab
from speechsql.semql.tree import Action, ActionSequence
from speechsql.synth import generate_records
from speechsql.train import (
    COMPONENTS,
    TrainConfig,
    finetune_loss,
    grad_check,
    model_config_from,
    query_accuracy,
    set_seed,
    train_loop,
)


def _cfg(d=16, **kw):
    base = dict(speech={"n_blocks": 2, "channels": 4, "time_stride_blocks": (2,), "mel_stride_blocks": (1, 2)},
                emb_dim=8, dropout=0.0)
    base.update(kw)
    return desk_config(d, **base)


@pytest.fixture(scope="module")
def data(schemas, grammar):
    recs = generate_records(schemas.values(), 16, seed=3)
    insts = [build_instance(r, schemas[r["db_id"]], grammar) for r in recs]
    vocab = Vocab.build(schemas.values(), [i.transcript for i in insts])
    return insts, vocab


def _model(vocab, seed=0, **kw):
    set_seed(seed)
    return SpeechSQLNet(_cfg(**kw), vocab).eval()


def test_random_params_finite_positive_loss(schemas, data):
    insts, vocab = data
    m = _model(vocab)
    for inst in insts:
        loss = finetune_loss(inst, m, schemas)
        assert torch.isfinite(loss) and loss.item() > 0


def _gold_plan_tensors(m, inst, schemas):
    p = m.prepare(inst, schemas[inst.db_id])
    ln = schemas[inst.db_id].n_tables + schemas[inst.db_id].n_columns
    return p, collate_plans([p.plan], m.grammar.n_rules, ln, len(inst.candidate_values))


def test_uniform_model_loss_is_sum_log_k(schemas, data):
    insts, vocab = data
    m = _model(vocab)
    with torch.no_grad():
        for lin in (m.decoder.w_p, m.decoder.w_s, m.decoder.w_v):
            lin.weight.zero_()
            if lin.bias is not None:
                lin.bias.zero_()
    for inst in insts[:6]:
        p, _ = _gold_plan_tensors(m, inst, schemas)
        expected = sum(math.log(len(legal)) for legal in p.plan.legal)
        assert abs(finetune_loss(inst, m, schemas).item() - expected) < 1e-4


def test_perfect_model_loss_is_zero(schemas, data, monkeypatch):
    insts, vocab = data
    m = _model(vocab)
    inst = insts[0]
    _, (prev, sym, gold, steps, legal) = _gold_plan_tensors(m, inst, schemas)

    def point_mass(u, z_nodes, z_vals):
        # all mass on the gold action at every teacher-forced step
        out = torch.zeros(*u.shape[:-1], legal.shape[-1])
        return out.scatter(-1, gold[..., None], 1e4)

    monkeypatch.setattr(m.decoder, "unified_scores", point_mass)
    assert finetune_loss(inst, m, schemas).item() == 0.0


def test_loss_nonnegative(schemas, data):
    insts, vocab = data
    m = _model(vocab, seed=5)
    assert (m.nll([m.prepare(i, schemas[i.db_id]) for i in insts], [schemas[i.db_id] for i in insts]) >= 0).all()


def test_masked_gold_action_names_instance(schemas, data):
    insts, vocab = data
    m = _model(vocab)
    bad = dataclasses.replace(insts[0], id="broken-7",
                              gold_actions=ActionSequence((Action("column", 0),), insts[0].gold_actions.values))
    with pytest.raises(GoldActionMasked, match="broken-7"):
        train_loop([bad], [bad], schemas, TrainConfig(max_epochs=1), model=m)


def test_same_seed_same_epoch_one_loss(schemas, data):
    insts, vocab = data
    cfg = TrainConfig(lr=1e-3, max_epochs=1, batch_size=4, seed=3)
    a = train_loop(insts, insts[:4], schemas, cfg, model=_model(vocab, seed=1))
    b = train_loop(insts, insts[:4], schemas, cfg, model=_model(vocab, seed=1))
    assert abs(a.history[0]["train_loss"] - b.history[0]["train_loss"]) < 1e-6
    assert a.history[0]["train_loss"] == b.history[0]["train_loss"]


def test_training_reduces_loss(schemas, data):
    insts, vocab = data
    ck = train_loop(insts, insts[:4], schemas, TrainConfig(lr=3e-3, max_epochs=6, batch_size=4),
                    model=_model(vocab))
    losses = [h["train_loss"] for h in ck.history]
    assert losses[-1] < losses[0]


def test_checkpoint_layout_and_reload(schemas, data, tmp_path):
    insts, vocab = data
    ck = train_loop(insts, insts[:4], schemas, TrainConfig(lr=1e-3, max_epochs=2, batch_size=8),
                    model=_model(vocab), out_dir=tmp_path)
    for name in ("ckpt/1.bin", "ckpt/1.json", "ckpt/2.bin", "ckpt/2.json", "best.bin", "history.csv"):
        assert (tmp_path / name).exists(), name
    header = (tmp_path / "history.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,val_query_acc,seconds"
    loaded, meta = load_model(tmp_path / "ckpt" / f"{ck.epoch}.bin")
    assert meta["epoch"] == ck.epoch and len(meta["history"]) == ck.epoch
    # the final epoch file holds the last parameters; the returned model holds the best ones
    best, _ = load_model(tmp_path / "best.bin")
    probe = [m.prepare(i, schemas[i.db_id]) for m in (ck.model,) for i in insts[:3]]
    sch = [schemas[i.db_id] for i in insts[:3]]
    with torch.no_grad():
        assert torch.equal(ck.model.nll(probe, sch), best.nll(probe, sch))


def test_save_load_identical_forward(schemas, data, tmp_path):
    insts, vocab = data
    m = _model(vocab, seed=4)
    save_model(m, tmp_path / "m.bin")
    m2, _ = load_model(tmp_path / "m.bin")
    with torch.no_grad():
        a = m.nll([m.prepare(i, schemas[i.db_id]) for i in insts[:4]], [schemas[i.db_id] for i in insts[:4]])
        b = m2.nll([m2.prepare(i, schemas[i.db_id]) for i in insts[:4]], [schemas[i.db_id] for i in insts[:4]])
    assert torch.equal(a, b)
    assert m.predict_sqls(insts[:4], schemas) == m2.predict_sqls(insts[:4], schemas)


def test_pretrained_weights_initialize_finetuning(schemas, data):
    insts, vocab = data
    donor = _model(vocab, seed=2)
    res = run_pretraining(insts, schemas, PretrainConfig(sspt_epochs=1, sipt_epochs=1, batch_size=8),
                          donor.speech, donor.tokens, vocab)
    m = _model(vocab, seed=3)
    m.speech.load_state_dict(res.speech_state, strict=True)
    m.tokens.load_state_dict(res.text_state, strict=True)
    train_loop(insts[:4], insts[:2], schemas, TrainConfig(max_epochs=1), model=m)


def test_no_linking_equals_hand_wired_path(schemas, data):
    insts, vocab = data
    full = _model(vocab, seed=6)
    ablated = SpeechSQLNet(_cfg(no_linking=True), vocab).eval()
    ablated.load_state_dict(full.state_dict())
    prepared = [full.prepare(i, schemas[i.db_id]) for i in insts[:4]]
    sch = [schemas[i.db_id] for i in insts[:4]]

    from speechsql.speech_encoder import collate_features

    with torch.no_grad():
        feats, lengths = collate_features([p.features for p in prepared])
        z_a, mask_a = full.speech(feats, lengths)
        z_s, mask_s = full.encode_schemas(sch)
        z_v, mask_v = full.encode_values([p.value_ids for p in prepared])
        z_a, z_s = full.fusion(z_a, mask_a, z_s, mask_s)
        got = ablated.encode(feats, lengths, sch, [p.value_ids for p in prepared])
        assert torch.equal(got[0], z_a) and torch.equal(got[2], z_s)
        # and linking does change the full model
        assert not torch.allclose(full.encode(feats, lengths, sch, [p.value_ids for p in prepared])[0], z_a)


def test_ablation_variants_run(schemas, data):
    insts, vocab = data
    for kw in ({"no_fusion": True}, {"no_gcn": "identity"}, {"no_gcn": "rnn"}, {"no_linking": True}):
        m = _model(vocab, **kw)
        assert torch.isfinite(m.loss(insts[:3], schemas))
        assert 0.0 <= query_accuracy(m, insts[:3], schemas) <= 1.0
    assert _model(vocab, no_fusion=True).fusion is None
    assert _model(vocab, no_gcn=True).graph is None


def test_model_config_from_train_config():
    cfg = model_config_from(TrainConfig(d_model=64, n_heads=2, d_ff=32, dropout=0.2, no_linking=True))
    assert cfg.d_model == 64 and cfg.fusion.n_heads == 2 and cfg.fusion.d_ff == 32
    assert cfg.dropout == 0.2 and cfg.fusion.dropout == 0.2 and cfg.no_linking


def test_train_loop_builds_model(schemas, data):
    insts, _ = data
    ck = train_loop(insts[:2], insts[:2], schemas, TrainConfig(d_model=16, n_heads=2, d_ff=16, max_epochs=1))
    assert ck.model.cfg.d_model == 16


def test_empty_training_set(schemas):
    with pytest.raises(ValueError):
        train_loop([], [], schemas, TrainConfig())


def test_grad_check_unknown_component():
    with pytest.raises(UnknownComponent):
        grad_check("nope")


@pytest.mark.parametrize("component", COMPONENTS)
def test_grad_check_components(component):
    assert grad_check(component) < 1e-4
