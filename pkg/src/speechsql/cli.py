"""Command-line entry point: ``speechsql <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .dataset import (
    NoiseSpec,
    inject_asr_noise,
    load_audio,
    load_instances,
    write_manifest,
)
from .errors import SpeechSQLError
from .evaluation import evaluate, write_report
from .features import synth_pseudo_speech
from .model import ModelConfig, SpeechSQLNet, desk_config, load_model, save_model
from .pretrain import PretrainConfig, run_pretraining
from .schema import load_schema_store, save_schema_store
from .schema_encoder import Vocab
from .semql import load_grammar
from .synth import builtin_schemas, generate_records, materialize, split_records
from .train import COMPONENTS, TrainConfig, grad_check, set_seed, train_loop

log = logging.getLogger("speechsql")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get("SPEECHSQL_SEED", "0"))


def _write_run_config(args, out: Path, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    cfg.update({"seed": _seed(args), "version": __version__})
    cfg.update(extra or {})
    (out / "run_config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))


def _need(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"the following arguments are required: --{n.replace('_', '-')}")


def _model_config(args) -> ModelConfig:
    overrides = {}
    for flag in ("no_linking", "no_fusion"):
        if getattr(args, flag, False):
            overrides[flag] = True
    if getattr(args, "no_gcn", None):
        overrides["no_gcn"] = args.no_gcn
    if getattr(args, "unbounded_rule_logits", False):
        overrides["bounded_rule_logits"] = False
    if args.dropout is not None:
        overrides["dropout"] = args.dropout
    if args.paper_size:
        cfg = ModelConfig(**overrides)
    else:
        cfg = desk_config(args.d_model, **overrides)
    return cfg


def _schemas(args) -> dict:
    """``--schemas``, else the ``schemas.json`` that ``synth-data`` writes beside the manifest."""
    if args.schemas:
        return load_schema_store(args.schemas)
    manifest = getattr(args, "manifest", None)
    guess = Path(manifest).parent / "schemas.json" if manifest else None
    if guess is None or not guess.exists():
        raise UsageError("the following arguments are required: --schemas")
    return load_schema_store(guess)


def _data(args, manifest):
    grammar = load_grammar(args.grammar) if getattr(args, "grammar", None) else None
    schemas = _schemas(args)
    insts = load_instances(manifest, schemas, grammar, seed=_seed(args))
    if not insts:
        raise SpeechSQLError(f"{manifest}: no instances")
    return schemas, insts, grammar


# ---------------------------------------------------------------- subcommands


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    seed = _seed(args)
    if args.schemas and Path(args.schemas).exists():
        schemas = list(load_schema_store(args.schemas).values())
    else:
        if args.schemas:
            raise SpeechSQLError(f"schema store {args.schemas} does not exist (use --builtin-schemas)")
        schemas = builtin_schemas()
    out.mkdir(parents=True, exist_ok=True)
    save_schema_store(out / "schemas.json", schemas)
    if args.n_test:
        train, test = split_records(schemas, args.n, args.n_test, seed)
        write_manifest(out / "heldout.jsonl", materialize(test, out))
    else:
        train = generate_records(schemas, args.n, seed)
    write_manifest(out / "manifest.jsonl", materialize(train, out))
    _write_run_config(args, out)
    print(f"wrote {len(train)} records to {out / 'manifest.jsonl'}")
    return 0


def _build_model(args, schemas, insts, grammar):
    if args.init:
        model, _ = load_model(args.init, grammar)
        return model
    vocab = Vocab.build(schemas.values(), [i.transcript or [] for i in insts],
                        [v for i in insts for v in i.candidate_values])
    return SpeechSQLNet(_model_config(args), vocab, grammar)


def _pretrain(args, stage: str) -> int:
    _need(args, "manifest")
    out = Path(args.out)
    seed = _seed(args)
    set_seed(seed)
    schemas, insts, grammar = _data(args, args.manifest)
    model = _build_model(args, schemas, insts, grammar)
    cfg = PretrainConfig(sspt_epochs=args.epochs, sipt_epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                         seed=seed, no_sspt=stage != "sspt", no_sipt=stage != "sipt")
    res = run_pretraining(insts, schemas, cfg, model.speech, model.tokens, model.vocab, out, resume=args.resume)
    save_model(model, out / "pretrained.bin", {"pretrain_stage": stage, "history": res.history})
    _write_run_config(args, out, {"pretrain_config": asdict(cfg)})
    print(f"saved {out / 'pretrained.bin'}")
    return 0


def cmd_train(args) -> int:
    _need(args, "grammar", "manifest")
    out = Path(args.out)
    seed = _seed(args)
    set_seed(seed)
    schemas, insts, grammar = _data(args, args.manifest)
    val = load_instances(args.val_manifest, schemas, grammar, seed=seed) if args.val_manifest else insts
    model = _build_model(args, schemas, insts, grammar)
    tc = TrainConfig(lr=args.lr, batch_size=args.batch_size, max_epochs=args.epochs, seed=seed,
                     eval_every=args.eval_every, grammar=args.grammar, d_model=model.cfg.d_model,
                     no_linking=model.cfg.no_linking, no_fusion=model.cfg.no_fusion, no_gcn=model.cfg.no_gcn,
                     freeze_text_encoder=args.freeze_text_encoder)
    ck = train_loop(insts, val, schemas, tc, model=model, out_dir=out)
    _write_run_config(args, out, {"train_config": asdict(tc), "model_config": model.cfg.to_dict()})
    print(f"best val query acc {ck.best_acc:.4f} at epoch {ck.best_epoch}; checkpoint {out / 'best.bin'}")
    return 0


def cmd_eval(args) -> int:
    _need(args, "ckpt", "manifest")
    out = Path(args.out)
    seed = _seed(args)
    grammar = load_grammar(args.grammar) if args.grammar else None
    model, _ = load_model(args.ckpt, grammar)
    schemas = _schemas(args)
    insts = load_instances(args.manifest, schemas, model.grammar, seed=seed)
    if not insts:
        raise SpeechSQLError(f"{args.manifest}: no instances")
    extra = {}
    if args.inject_wer is not None:
        vocab = sorted({w for i in insts for w in (i.transcript or [])})
        for i in insts:
            if i.transcript is None:
                raise SpeechSQLError(f"instance {i.id} has no transcript to corrupt")
            words = inject_asr_noise(i.transcript, NoiseSpec(args.inject_wer, seed, vocab))
            i.features = synth_pseudo_speech(words)
        extra["inject_wer"] = args.inject_wer
    res = evaluate(model, insts, schemas, model.grammar)
    write_report(res, out, extra)
    _write_run_config(args, out)
    print(json.dumps(res.summary()))
    return 0


def cmd_predict(args) -> int:
    _need(args, "ckpt", "schemas", "db_id", "audio")
    out = Path(args.out)
    model, _ = load_model(args.ckpt)
    schemas = load_schema_store(args.schemas)
    if args.db_id not in schemas:
        raise SpeechSQLError(f"unknown db_id {args.db_id!r}")
    schema = schemas[args.db_id]
    feats = load_audio(args.audio)
    # no gold query at prediction time: spoken pool values plus pool distractors
    spoken = args.audio[len("pseudo:"):].split() if args.audio.startswith("pseudo:") else []
    pool = list(schema.value_pool) or [str(i) for i in range(31)]
    values = list(dict.fromkeys([w for w in spoken if w in pool or w.replace(".", "", 1).isdigit()] + pool))
    from .dataset import Instance
    from .semql import ActionSequence

    inst = Instance("predict", feats, args.db_id, "", ActionSequence(()), values[: max(len(spoken), 9)])
    sql = model.predict_sql(inst, schema)
    _write_run_config(args, out, {"prediction": sql})
    print(sql)
    return 0


def cmd_gradcheck(args) -> int:
    out = Path(args.out)
    comps = COMPONENTS if args.component == "all" else [args.component]
    results = {}
    for c in comps:
        results[c] = grad_check(c, eps=args.eps)
        print(f"{c}: max relative error {results[c]:.3e}")
    _write_run_config(args, out, {"results": results})
    return 0 if all(v < args.tol for v in results.values()) else 2


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="speechsql", description="End-to-end speech-to-SQL experiments.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out_default="."):
        sp.add_argument("--seed", type=int, default=None, help="random seed (default: $SPEECHSQL_SEED or 0)")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")

    def model_flags(sp):
        sp.add_argument("--grammar", help="grammar file (default: shipped grammar)")
        sp.add_argument("--schemas", help="schema store JSON")
        sp.add_argument("--manifest", help="instance manifest (JSON lines)")
        sp.add_argument("--init", help="checkpoint to start from")
        sp.add_argument("--d-model", type=int, default=128)
        sp.add_argument("--paper-size", action="store_true", help="use the full-size default configuration")
        sp.add_argument("--epochs", type=int, default=50)
        sp.add_argument("--batch-size", type=int, default=16)
        sp.add_argument("--lr", type=float, default=1e-3)
        sp.add_argument("--dropout", type=float, default=None)
        sp.add_argument("--no-linking", action="store_true")
        sp.add_argument("--no-fusion", action="store_true")
        sp.add_argument("--no-gcn", choices=["identity", "rnn"], default=None)
        sp.add_argument("--unbounded-rule-logits", action="store_true",
                        help="plain linear rule logits instead of tanh-bounded ones")

    sp = sub.add_parser("synth-data", help="generate a synthetic corpus")
    common(sp)
    sp.add_argument("--schemas", help="schema store to draw from (default: built-in schemas)")
    sp.add_argument("--n", type=int, default=200)
    sp.add_argument("--n-test", type=int, default=0, help="also write a held-out manifest of this size")
    sp.set_defaults(func=cmd_synth_data, required=())

    for name, stage in (("pretrain-ss", "sspt"), ("pretrain-si", "sipt")):
        sp = sub.add_parser(name, help=f"{stage} pre-training of the encoders")
        common(sp)
        model_flags(sp)
        sp.add_argument("--resume", action="store_true")
        sp.set_defaults(func=lambda a, s=stage: _pretrain(a, s), required=())

    sp = sub.add_parser("train", help="fine-tune the full model")
    common(sp)
    model_flags(sp)
    sp.add_argument("--val-manifest")
    sp.add_argument("--eval-every", type=int, default=1)
    sp.add_argument("--freeze-text-encoder", action="store_true")
    sp.set_defaults(func=cmd_train, required=())

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--ckpt")
    sp.add_argument("--manifest")
    sp.add_argument("--schemas")
    sp.add_argument("--grammar")
    sp.add_argument("--inject-wer", type=float, default=None)
    sp.set_defaults(func=cmd_eval, required=())

    sp = sub.add_parser("predict", help="decode one utterance")
    common(sp)
    sp.add_argument("--ckpt")
    sp.add_argument("--schemas")
    sp.add_argument("--db-id")
    sp.add_argument("--audio", help="WAV path or 'pseudo:<tokens>'")
    sp.set_defaults(func=cmd_predict, required=())

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(sp)
    sp.add_argument("--component", default="all", choices=("all",) + COMPONENTS)
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck, required=())
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        for name in args.required:
            _need(args, name)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "seed", None) is None and "SPEECHSQL_SEED" in os.environ:
            try:
                int(os.environ["SPEECHSQL_SEED"])
            except ValueError:
                raise UsageError("SPEECHSQL_SEED must be an integer")
        return args.func(args)
    except UsageError as exc:
        print(f"speechsql: error: {exc}", file=sys.stderr)
        return 1
    except (SpeechSQLError, OSError, ValueError, KeyError) as exc:
        print(f"speechsql: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
