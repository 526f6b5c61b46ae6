"""Command-line entry point: ``tacl <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Failures print a one-line JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path


from . import analysis as A
from . import corpus as C
from . import model as M
from . import trainer as T
from . import verify as V
from .masking import MaskingRates
from .objectives import LossConfig, LossError

DEFAULT_SEED = 13
SNAPSHOT = "resolved_config.json"
VOCAB_FILE = "vocab.txt"
TRAIN_RECIPES = ("tacl", "baseline-mt", "model-1", "model-2")


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

SECTIONS = {
    "model": {f.name for f in fields(M.ModelConfig)} - {"vocab_size"},
    "train": {f.name for f in fields(T.TrainConfig)},
    "loss": {f.name for f in fields(LossConfig)},
    "masking": {f.name for f in fields(MaskingRates)},
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: list[str]) -> dict:
    """Merge a JSON config file with ``section.key=value`` overrides.

    Every unknown section or key is collected and reported together.
    """
    cfg: dict = {s: {} for s in SECTIONS}
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        for section, values in raw.items():
            if not isinstance(values, dict):
                cfg.setdefault(section, values)
                continue
            cfg.setdefault(section, {}).update(values)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise UsageError(f"override {item!r} must look like section.key=value")
        section, name = key.split(".", 1)
        cfg.setdefault(section, {})[name] = _parse_value(value)
    bad = []
    for section, values in cfg.items():
        if section not in SECTIONS:
            bad.append(section)
            continue
        bad += [f"{section}.{k}" for k in values if k not in SECTIONS[section]]
    if bad:
        raise UsageError(f"unknown config keys: {', '.join(sorted(bad))}")
    return cfg


def _build(cfg: dict, vocab_size: int, recipe: str, seed: int):
    train_d = dict(cfg["train"])
    if "recipe" in train_d and train_d["recipe"] != recipe:
        raise UsageError(f"config recipe {train_d['recipe']!r} conflicts with {recipe!r}")
    train_d.update(recipe=recipe, seed=seed)
    model_d = {"vocab_size": vocab_size} | cfg["model"]
    model_d.setdefault("max_len", train_d.get("max_len", T.TrainConfig.max_len))
    loss_d = dict(cfg["loss"])
    if "terms" in loss_d:
        raise UsageError("loss.terms is fixed by the recipe; adjust loss.weights instead")
    try:
        model_cfg = M.ModelConfig(**model_d)
        train_cfg = T.TrainConfig(**train_d)
        loss_cfg = LossConfig.for_recipe(recipe, **loss_d)
        rates = MaskingRates(**cfg["masking"])
    except (ValueError, TypeError, LossError) as e:
        raise UsageError(str(e)) from e
    return model_cfg, train_cfg, loss_cfg, rates


def _snapshot(target: Path, command: str, args: argparse.Namespace, **resolved) -> None:
    """Write the resolved configuration to ``target`` (a directory gets ``resolved_config.json``)."""
    if target.suffix != ".json":
        target.mkdir(parents=True, exist_ok=True)
        target = target / SNAPSHOT
    payload = {"command": command, "args": {k: v for k, v in vars(args).items() if k != "func"}}
    for k, v in resolved.items():
        payload[k] = v.to_dict() if isinstance(v, LossConfig) else asdict(v)
    target.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _find_vocab(ckpt: Path, explicit: str | None) -> C.Vocab:
    if explicit:
        return C.Vocab.load(_need_file(explicit, "vocab"))
    for cand in (ckpt / VOCAB_FILE, ckpt.parent / VOCAB_FILE):
        if cand.exists():
            return C.Vocab.load(cand)
    raise UsageError(f"no {VOCAB_FILE} next to checkpoint {ckpt}; pass --vocab")


def _load_ckpt(path: str):
    p = _need_file(path, "checkpoint")
    if not (p / "params.bin").exists():
        raise UsageError(f"{path} is not a checkpoint directory (no params.bin)")
    return (p,) + M.load_checkpoint(p)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_build_vocab(args) -> int:
    docs = C.read_corpus(_need_file(args.corpus, "corpus"))
    vocab = C.build_vocab((s for d in docs for s in d), args.size, args.min_freq)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    _emit({"vocab": str(out), "size": len(vocab), "documents": len(docs)})
    return 0


def _run_training(args, recipe: str, base_params, vocab: C.Vocab, model_cfg, train_cfg, loss_cfg, rates) -> int:
    docs = C.read_corpus(_need_file(args.corpus, "corpus"))
    enc = C.encode_corpus(docs, vocab)
    out = Path(args.out)
    _snapshot(out, args.command, args, model=model_cfg, train=train_cfg, loss=loss_cfg, masking=rates)
    vocab.save(out / VOCAB_FILE)
    t0 = time.perf_counter()
    res = T.train(enc, base_params, model_cfg, train_cfg, loss_cfg, out_dir=out,
                  resume_from=args.resume, rates=rates)
    if res.final_checkpoint is not None:
        vocab.save(res.final_checkpoint / VOCAB_FILE)
    last = res.metrics[-1] if res.metrics else {}
    _emit({"recipe": recipe, "seed": train_cfg.seed, "steps": res.optimizer.step,
           "final_checkpoint": str(res.final_checkpoint), "last_metrics": last,
           "seconds": round(time.perf_counter() - t0, 3)})
    return 0


def cmd_pretrain_base(args) -> int:
    vocab = C.Vocab.load(_need_file(args.vocab, "vocab"))
    cfg = load_config(args.config, args.overrides)
    model_cfg, train_cfg, loss_cfg, rates = _build(cfg, len(vocab), "pretrain-base", args.seed)
    base = M.init_params(model_cfg, args.seed)
    return _run_training(args, "pretrain-base", base, vocab, model_cfg, train_cfg, loss_cfg, rates)


def cmd_train_tacl(args) -> int:
    if args.recipe not in TRAIN_RECIPES:
        raise UsageError(f"unknown recipe {args.recipe!r}; choose from {', '.join(TRAIN_RECIPES)}")
    path, base, ckpt_cfg, _ = _load_ckpt(args.base)
    vocab = _find_vocab(path, args.vocab)
    if len(vocab) != ckpt_cfg.vocab_size:
        raise UsageError(f"vocab size {len(vocab)} does not match checkpoint ({ckpt_cfg.vocab_size})")
    cfg = load_config(args.config, args.overrides)
    if cfg["model"]:
        raise UsageError("model.* keys cannot change a pre-trained checkpoint's architecture")
    cfg["model"] = {k: v for k, v in asdict(ckpt_cfg).items() if k != "vocab_size"}
    model_cfg, train_cfg, loss_cfg, rates = _build(cfg, ckpt_cfg.vocab_size, args.recipe, args.seed)
    return _run_training(args, args.recipe, base, vocab, model_cfg, train_cfg, loss_cfg, rates)


def cmd_analyze(args) -> int:
    path, params, cfg, meta = _load_ckpt(args.ckpt)
    vocab = _find_vocab(path, args.vocab)
    docs = C.encode_corpus(C.read_corpus(_need_file(args.corpus, "corpus")), vocab)
    sample = A.sample_sentences(docs, args.sample, cfg.max_len, args.seed)
    report = A.layerwise_self_similarity(params, cfg, sample, args.include_specials,
                                         model_tag=args.tag or str(path), corpus_tag=str(args.corpus))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    _snapshot(out.with_name(out.stem + ".config.json"), "analyze", args)
    _emit({"report": str(out), "seed": args.seed, "sentences": len(sample), "means": report.means()})
    return 0


def cmd_heatmap(args) -> int:
    path, params, cfg, _ = _load_ckpt(args.ckpt)
    vocab = _find_vocab(path, args.vocab)
    ids = C.encode(args.text, vocab)
    if not ids:
        raise UsageError("text encodes to no tokens")
    seq = C.single_sequence(ids, cfg.max_len)
    if not -(cfg.n_layers + 1) <= args.layer <= cfg.n_layers:
        raise UsageError(f"layer must lie in [0, {cfg.n_layers}] (or negative from the end)")
    matrix = A.self_sim_matrix(params, cfg, seq, args.layer, [vocab.tokens[i] for i in seq.ids])
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path, pgm_path = A.export_heatmap(matrix, prefix, args.scale)
    _emit({"csv": str(csv_path), "pgm": str(pgm_path), "tokens": matrix.tokens, "layer": args.layer})
    return 0


def cmd_compare(args) -> int:
    a = A.SelfSimReport.load(_need_file(args.a, "report"))
    b = A.SelfSimReport.load(_need_file(args.b, "report"))
    try:
        comp = A.compare_models(a, b)
    except A.AnalysisError as e:
        raise UsageError(str(e)) from e
    print(comp.table(args.a_name, args.b_name))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(asdict(comp), indent=2) + "\n")
    return 0


def _report_checks(checks: list[V.Check]) -> int:
    for c in checks:
        _emit(c.to_dict())
    failed = [c.name for c in checks if not c.passed]
    _emit({"checks": len(checks), "failed": failed})
    return 1 if failed else 0


def cmd_gradcheck(args) -> int:
    if args.op and args.full_model:
        raise UsageError("--op and --full-model are mutually exclusive")
    if args.op and args.op not in V.op_names():
        raise UsageError(f"unknown operation {args.op!r}; choose from {', '.join(V.op_names())}")
    if args.full_model:
        checks = V.full_model_checks(args.seed) + V.full_model_checks(args.seed + 1, terms=("mlm", "nsp", "sent_cl"))
    else:
        checks = V.gradient_suite(args.instances, args.seed, op=args.op, full_model=args.op is None)
    return _report_checks(checks)


def cmd_selftest(args) -> int:
    return _report_checks(V.selftest(args.masking_tokens, args.tacl_instances))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tacl", description="Token-aware contrastive continual pre-training toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("build-vocab", help="build a subword vocabulary from a corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--min-freq", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_vocab)

    def training_args(s):
        s.add_argument("--corpus", required=True)
        s.add_argument("--config", help="JSON file with model/train/loss/masking sections")
        s.add_argument("--out", required=True)
        s.add_argument("--seed", type=int, default=DEFAULT_SEED)
        s.add_argument("--resume", help="checkpoint directory to resume from")
        s.add_argument("overrides", nargs="*", metavar="section.key=value")

    s = sub.add_parser("pretrain-base", help="first-stage MLM+NSP pre-training from random init")
    s.add_argument("--vocab", required=True)
    training_args(s)
    s.set_defaults(func=cmd_pretrain_base)

    s = sub.add_parser("train-tacl", help="continual training from a base checkpoint")
    s.add_argument("--base", required=True)
    s.add_argument("--recipe", default="tacl")
    s.add_argument("--vocab", help="defaults to vocab.txt beside the base checkpoint")
    training_args(s)
    s.set_defaults(func=cmd_train_tacl)

    s = sub.add_parser("analyze", help="layer-wise self-similarity report")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--sample", type=int, default=2000)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=DEFAULT_SEED)
    s.add_argument("--vocab")
    s.add_argument("--tag")
    s.add_argument("--include-specials", action="store_true")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("heatmap", help="self-similarity matrix of one sentence as CSV + PGM")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--layer", type=int, default=-1)
    s.add_argument("--out", required=True, help="output prefix")
    s.add_argument("--scale", type=int, default=8)
    s.add_argument("--vocab")
    s.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("compare", help="layer-wise difference of two reports (a - b)")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--a-name", default="a")
    s.add_argument("--b-name", default="b")
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--op")
    s.add_argument("--full-model", action="store_true")
    s.add_argument("--instances", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("selftest", help="loss oracles, closed forms and masking statistics")
    s.add_argument("--masking-tokens", type=int, default=1_000_000)
    s.add_argument("--tacl-instances", type=int, default=1000)
    s.set_defaults(func=cmd_selftest)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        return _fail("usage", str(e), 2)
    except (C.CorpusError, A.AnalysisError, T.TrainingDiverged, ValueError, OSError) as e:
        return _fail(type(e).__name__, str(e), 1)
    except KeyboardInterrupt:
        return _fail("interrupted", "interrupted", 1)


if __name__ == "__main__":
    sys.exit(main())
