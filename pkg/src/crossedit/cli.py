"""Command-line entry point.

One config file (YAML or JSON) holds sections named after the config types:
``build``, ``xeit``, ``tlpo``, ``run`` and ``toy_model``. Any key can be
overridden with ``--set section.key=value``; values are parsed as YAML.

Exit codes: 0 success, 2 config error, 3 model error, 4 data error, 1 other.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import yaml

from . import harness
from .errors import ConfigError, CrossEditError, DataError, ModelError
from .types import load_cases, read_samples, write_samples

log = logging.getLogger("crossedit")

SECTIONS = ("build", "xeit", "tlpo", "run", "toy_model")
EXIT_CONFIG, EXIT_MODEL, EXIT_DATA = 2, 3, 4


# -- config handling -----------------------------------------------------


def load_config(path: str | None, overrides: list[str]) -> dict:
    doc: dict = {}
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    for item in overrides:
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in SECTIONS:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        doc.setdefault(section, {})[name] = yaml.safe_load(raw)
    return doc


def _typed(cls, d: dict | None):
    d = dict(d or {})
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def _run_config(doc: dict, args) -> harness.RunConfig:
    d = dict(doc.get("run") or {})
    if getattr(args, "model", None):
        d["model"] = args.model
    if getattr(args, "out", None):
        d["out_dir"] = args.out
    return harness.RunConfig.from_dict(d)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False, sort_keys=True, default=list) + "\n"


# -- subcommands ---------------------------------------------------------


def cmd_build_data(args, doc) -> int:
    from .databuilder.assemble import BuildConfig, published_quotas
    from .databuilder.client import ChatClient, MockTransport

    d = dict(doc.get("build") or {})
    d.setdefault("quotas", published_quotas())
    if args.drop:
        d["drops"] = sorted(set(d.get("drops", [])) | set(args.drop))
    config = BuildConfig.from_dict(d)
    cases = load_cases(args.cases)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = args.cache_dir or out / "cache"
    if args.endpoint:
        client = ChatClient.http(args.endpoint, args.service_model, cache_dir=cache, max_in_flight=config.max_in_flight)
    else:
        log.info("no endpoint given; using the offline mock service")
        client = ChatClient(MockTransport(), model="mock", cache_dir=cache, max_in_flight=config.max_in_flight)
    from .databuilder.assemble import assemble

    result = assemble(config, cases, client)
    data = out / "train.jsonl"
    write_samples(result.samples, data)
    stats = out / "stats.json"
    stats.write_text(_dump(result.stats.to_dict()), encoding="utf-8")
    report = out / "build-report.json"
    report.write_text(
        _dump({"shortfalls": result.shortfalls, "rejections": result.rejections,
               "service_calls": result.service_calls, "cache_hits": result.cache_hits}),
        encoding="utf-8",
    )
    harness.write_manifest(out, [args.cases], [data, stats, report], {"seed": config.seed}, config.to_dict())
    print(f"{len(result.samples)} samples -> {data} ({result.service_calls} service calls, {result.cache_hits} cache hits)")
    return 0


def _vocab_for(samples):
    from .lm.vocab import Vocab
    from .xeit import ANSWER_FIELD, EDIT_FIELD, QUERY_FIELD

    texts = [EDIT_FIELD, QUERY_FIELD, ANSWER_FIELD]
    for s in samples:
        texts += [s.query, s.answer] + ([s.edit_text] if s.edit_text else [])
    return Vocab.from_texts(texts)


def _toy_model(doc: dict, vocab):
    from .lm.model import ToyLM, ToyLMConfig

    d = dict(doc.get("toy_model") or {})
    d.update(vocab_size=len(vocab), bos_id=vocab.bos_id, eos_id=vocab.eos_id, pad_id=vocab.pad_id)
    return ToyLM(_typed(ToyLMConfig, d))


def cmd_train_xeit(args, doc) -> int:
    from .lm.checkpoint import save_checkpoint
    from .lm.vocab import Vocab
    from .xeit import TrainConfig, train_xeit

    config = _typed(TrainConfig, doc.get("xeit"))
    samples = read_samples(args.data)
    if args.drop:
        from .databuilder.assemble import sample_dropped

        samples = [s for s in samples if not sample_dropped(s, args.drop)]
    if args.init:
        model, vocab = harness.load_model(args.init, args.vocab)
    else:
        vocab = Vocab.load(args.vocab) if args.vocab else _vocab_for(samples)
        model = _toy_model(doc, vocab)
    out = Path(args.out)
    result = train_xeit(model, samples, config, vocab, out)
    final = out / "xeit.ckpt"
    save_checkpoint(model, final, vocab)
    harness.write_manifest(out, [args.data] + ([args.init] if args.init else []),
                           [*result.checkpoints, final, out / "xeit-loss.tsv"], {"seed": config.seed}, asdict(config))
    print(f"trained {len(result.losses)} steps, final loss {result.losses[-1]:.4f} -> {final}")
    return 0


def _translator(source: str, langs):
    if source == "toy":
        from .toy import ToyWorld

        return ToyWorld().translator()
    if source.startswith(("http://", "https://")):
        from .align import HttpTranslator

        return HttpTranslator(source, langs)
    raise ConfigError(f"translator must be 'toy' or a URL, got {source!r}")


def cmd_train_tlpo(args, doc) -> int:
    from .lm.checkpoint import save_checkpoint
    from .tlpo import TlpoConfig, build_pairs, preference_queries, read_pairs, split_holdout, train_tlpo, write_pairs

    config = _typed(TlpoConfig, doc.get("tlpo"))
    model, vocab = harness.load_model(args.model, args.vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = [args.model]
    if args.pairs:
        pairs = read_pairs(args.pairs, vocab)
        inputs.append(args.pairs)
    else:
        if not args.cases:
            raise ConfigError("train-tlpo needs --cases or --pairs")
        cases = load_cases(args.cases)
        inputs.append(args.cases)
        train_cases, _ = split_holdout(cases, config.holdout_fraction, config.seed)
        langs = sorted({lang for c in cases for lang in c.langs})
        queries = preference_queries(train_cases, config.include_rephrases)
        pairs = build_pairs(model, queries, _translator(args.translator, langs), config, vocab)
        write_pairs(pairs, out / "pairs.jsonl", vocab)
    reference = model.clone() if config.method == "dpo" else None
    result = train_tlpo(model, pairs, config, vocab, out, reference_model=reference)
    final = out / "tlpo.ckpt"
    save_checkpoint(model, final, vocab)
    outputs = [*result.checkpoints, final, out / "tlpo-curve.tsv"]
    if (out / "pairs.jsonl").exists():
        outputs.append(out / "pairs.jsonl")
    harness.write_manifest(out, inputs, outputs, {"seed": config.seed}, asdict(config))
    print(f"{len(pairs)} pairs, {len(result.curve)} steps -> {final}")
    return 0


def cmd_eval(args, doc) -> int:
    config = _run_config(doc, args)
    cases = load_cases(args.cases)
    tables = harness.run(config, cases)
    inputs = [args.cases, harness.stage_checkpoint(config)]
    harness.write_tables(tables, config.out_dir, inputs, {"seed": config.seed}, config.to_dict())
    for t in tables.values():
        print(t.to_text())
    return 0


def cmd_ablate(args, doc) -> int:
    config = _run_config(doc, args)
    cases = load_cases(args.cases)
    if args.drop:
        if not args.train_data:
            raise ConfigError("data ablations need --train-data")
        variants = harness.data_variants(args.drop)
        pipeline = _retrain_pipeline(doc, args.train_data, Path(config.out_dir))
        inputs = [args.cases, args.train_data]
    else:
        variants = list(harness.STAGE_VARIANTS)
        pipeline = harness.checkpoint_pipeline(config)
        inputs = [args.cases] + [p for p in (config.model, config.xeit_checkpoint, config.tlpo_checkpoint) if p]
    tables = harness.run_ablation(config, variants, cases, pipeline)
    harness.write_tables(tables, config.out_dir, inputs, {"seed": config.seed}, config.to_dict())
    for t in tables.values():
        print(t.to_text())
    return 0


def _retrain_pipeline(doc: dict, train_data: str, out_dir: Path):
    """XE-IT from scratch on the dataset minus each variant's dropped sections."""
    from .databuilder.assemble import sample_dropped
    from .xeit import TrainConfig, train_xeit

    config = _typed(TrainConfig, doc.get("xeit"))
    samples = read_samples(train_data)
    vocab = _vocab_for(samples)

    def pipeline(v: harness.Variant):
        kept = [s for s in samples if not sample_dropped(s, v.drops)]
        model = _toy_model(doc, vocab)
        train_xeit(model, kept, config, vocab, out_dir / "variants" / v.name)
        return model, vocab

    return pipeline


def cmd_report(args, doc) -> int:
    from .metrics import ReportTable

    src = Path(args.input)
    files = sorted(src.glob("*.cells.json")) if src.is_dir() else [src]
    if not files:
        raise DataError(f"no table files under {src}")
    for f in files:
        try:
            table = ReportTable.from_dict(json.loads(f.read_text(encoding="utf-8")))
        except (ValueError, KeyError) as exc:
            raise DataError(f"{f}: not a table file ({exc})") from exc
        sys.stdout.write(table.render(args.format))
    return 0


def cmd_toy_data(args, doc) -> int:
    from .toy import ToyWorld
    from .types import dump_cases

    world = ToyWorld()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_samples(world.parallel_samples(args.n_train, seed=args.seed), out / "train.jsonl")
    dump_cases(world.eval_cases(args.n_eval, seed=args.seed + 98), out / "cases.jsonl")
    world.vocab().save(out / "vocab.json")
    print(f"toy data -> {out}")
    return 0


# -- parser --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossedit", description="Cross-lingual knowledge editing pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="YAML or JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("build-data", cmd_build_data, "build the parallel training set through a chat service")
    sp.add_argument("--cases", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--endpoint", help="chat-completion URL; omit to use the offline mock")
    sp.add_argument("--service-model", default="default")
    sp.add_argument("--cache-dir")
    sp.add_argument("--drop", action="append", default=[])

    sp = add("train-xeit", cmd_train_xeit, "supervised tuning on the parallel set")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--init", help="starting checkpoint; a fresh toy model otherwise")
    sp.add_argument("--vocab")
    sp.add_argument("--drop", action="append", default=[])

    sp = add("train-tlpo", cmd_train_tlpo, "preference tuning toward target-language answers")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--cases")
    sp.add_argument("--pairs")
    sp.add_argument("--translator", default="toy")
    sp.add_argument("--vocab")

    sp = add("eval", cmd_eval, "single, batch or sequential editing evaluation")
    sp.add_argument("--cases", required=True)
    sp.add_argument("--model")
    sp.add_argument("--out")

    sp = add("ablate", cmd_ablate, "stage or data-composition ablation")
    sp.add_argument("--cases", required=True)
    sp.add_argument("--model")
    sp.add_argument("--out")
    sp.add_argument("--drop", action="append", default=[])
    sp.add_argument("--train-data")

    sp = add("report", cmd_report, "render stored tables")
    sp.add_argument("input")
    sp.add_argument("--format", choices=("text", "csv", "json"), default="text")

    sp = add("toy-data", cmd_toy_data, "write a toy training set, cases and vocabulary")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-train", type=int, default=200)
    sp.add_argument("--n-eval", type=int, default=100)
    sp.add_argument("--seed", type=int, default=1)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        doc = load_config(args.config, args.set)
        return args.fn(args, doc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CrossEditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
