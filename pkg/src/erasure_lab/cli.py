"""Command-line entry point: ``erasure-lab <command> [options]``.

Option values are resolved in this order: explicit flag, then the
``--config`` JSON document, then the built-in default. The config document
is a flat object keyed by option name (``hidden_size``, ``gamma``...);
keys the command does not know are rejected. Errors print one line,
``error: <Kind>: <message>``, to stderr and exit with status 1; usage errors
exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import erasure as er
from . import models, report, rl
from .embeddings import EmbeddingTable, load_text_embeddings, save_text_embeddings

log = logging.getLogger("erasure_lab")


class UsageError(Exception):
    """Bad command-line or config input; exits with status 2."""


# option name -> (flag kwargs, default); every command shares --seed and --config
COMMON = {"seed": ({"type": int}, 0)}

COMMANDS: dict[str, dict] = {
    "synth": {
        "help": "generate a synthetic corpus, embeddings and splits",
        "kind": ({"choices": sorted(data_mod.GENERATORS)}, "planted_dims"),
        "out_dir": ({}, None),
        "n_examples": ({"type": int}, None),
        "vocab_size": ({"type": int}, None),
        "dim": ({"type": int}, None),
        "noise_sigma": ({"type": float}, None),
        "min_len": ({"type": int}, None),
        "max_len": ({"type": int}, None),
        "max_sentences": ({"type": int}, None),
        "scope_rate": ({"type": float}, None),
        "ratios": ({}, "0.8,0.1,0.1"),
    },
    "train": {
        "help": "train a classifier or regressor",
        "embeddings": ({}, None),
        "train": ({}, None),
        "dev": ({}, None),
        "format": ({"choices": ["tsv", "conll"]}, "tsv"),
        "arch": ({"choices": list(models.ARCHITECTURES)}, "window_mlp"),
        "head": ({"choices": list(models.HEADS)}, "classifier"),
        "hidden_size": ({"type": int}, 50),
        "intermediate_layers": ({"type": int}, 2),
        "window": ({"type": int}, 5),
        "dropout": ({"type": float}, 0.0),
        "dropout_sites": ({"choices": list(models.DROPOUT_SITES)}, "input+hidden"),
        "trainable_embeddings": ({"action": "store_true", "default": None}, False),
        "lr": ({"type": float}, 1e-3),
        "batch_size": ({"type": int}, 32),
        "epochs": ({"type": int}, 50),
        "patience": ({"type": int}, 5),
        "out": ({}, None),
    },
    "eval": {
        "help": "accuracy or mean squared error on a data file",
        "model": ({}, None),
        "data": ({}, None),
        "format": ({"choices": ["tsv", "conll"]}, "tsv"),
        "out": ({}, None),
    },
    "importance": {
        "help": "erasure importance of dimensions, hidden units or word types",
        "model": ({}, None),
        "data": ({}, None),
        "format": ({"choices": ["tsv", "conll"]}, "tsv"),
        "level": ({"choices": ["dim", "unit", "word"]}, "dim"),
        "layer": ({"type": int}, 1),
        "word_mode": ({"choices": list(er.WORD_MODES)}, "delete"),
        "per_occurrence": ({"action": "store_true", "default": None}, False),
        "out": ({}, None),
        "detail": ({}, None),
        "report": ({}, None),
        "heatmap": ({}, None),
        "log_scale": ({"action": "store_true", "default": None}, False),
    },
    "layer-importance": {
        "help": "importance of every input dimension and hidden unit, per layer",
        "model": ({}, None),
        "data": ({}, None),
        "format": ({"choices": ["tsv", "conll"]}, "tsv"),
        "out": ({}, None),
        "heatmap": ({}, None),
        "log_scale": ({"action": "store_true", "default": None}, False),
    },
    "word-ranking": {
        "help": "word types ranked by mean importance",
        "model": ({}, None),
        "data": ({}, None),
        "top_k": ({"type": int}, 10),
        "sign": ({"choices": ["positive", "negative"]}, "positive"),
        "min_support": ({"type": int}, 1),
        "word_mode": ({"choices": list(er.WORD_MODES)}, "delete"),
        "out": ({}, None),
    },
    "histogram": {
        "help": "counts of word types per importance bucket, one row per model",
        "model": ({"action": "append"}, None),
        "data": ({}, None),
        "edges": ({}, "-1,0,1,10,100"),
        "word_mode": ({"choices": list(er.WORD_MODES)}, "delete"),
        "out": ({}, None),
    },
    "freq-corr": {
        "help": "least-squares fit of log frequency against one embedding dimension",
        "embeddings": ({}, None),
        "freqs": ({}, None),
        "dim": ({"type": int}, None),
        "out": ({}, None),
    },
    "rl-train": {
        "help": "train a REINFORCE policy proposing minimal flipping sets",
        "model": ({}, None),
        "data": ({}, None),
        "gamma": ({"type": float}, 0.01),
        "k": ({"type": int}, 4),
        "epochs": ({"type": int}, 20),
        "policy_lr": ({"type": float}, 0.05),
        "baseline_lr": ({"type": float}, 0.01),
        "out": ({}, None),
    },
    "rl-apply": {
        "help": "apply a trained policy to each example",
        "model": ({}, None),
        "policy": ({}, None),
        "data": ({}, None),
        "mode": ({}, "sample_best(64)"),
        "out": ({}, None),
        "render": ({}, None),
    },
    "oracle": {
        "help": "exhaustive minimal flipping sets",
        "model": ({}, None),
        "data": ({}, None),
        "max_n": ({"type": int}, 14),
        "out": ({}, None),
    },
    "render": {
        "help": "draw an importance CSV as an SVG heatmap, or erasure records as text and SVG",
        "csv": ({}, None),
        "records": ({}, None),
        "data": ({}, None),
        "model": ({}, None),
        "log_scale": ({"action": "store_true", "default": None}, False),
        "out": ({}, None),
    },
}

REQUIRED = {
    "synth": ["out_dir"],
    "train": ["embeddings", "train", "dev", "out"],
    "eval": ["model", "data"],
    "importance": ["model", "data", "out"],
    "layer-importance": ["model", "data", "out"],
    "word-ranking": ["model", "data", "out"],
    "histogram": ["model", "data", "out"],
    "freq-corr": ["embeddings", "freqs", "dim"],
    "rl-train": ["model", "data", "out"],
    "rl-apply": ["model", "policy", "data", "out"],
    "oracle": ["model", "data", "out"],
    "render": ["out"],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: UsageError: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="erasure-lab", description="Representation erasure toolkit.")
    parser.add_argument("--seed", type=int, default=None, help="global random seed (default 0)")
    parser.add_argument("--config", default=None, help="JSON document of option values")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, spec in COMMANDS.items():
        p = sub.add_parser(name, help=spec["help"])
        # accepted after the command too; SUPPRESS keeps a global value intact
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        p.add_argument("--config", default=argparse.SUPPRESS)
        for opt, value in spec.items():
            if opt == "help":
                continue
            kwargs = dict(value[0])
            kwargs.setdefault("default", None)
            p.add_argument("--" + opt.replace("_", "-"), dest=opt, **kwargs)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags, config file and defaults into one option dict."""
    spec = COMMANDS[args.command]
    known = {k for k in spec if k != "help"} | set(COMMON)
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config document must be a JSON object")
        unknown = sorted(set(doc) - known)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {unknown}")
    opts = {}
    for key in sorted(known):
        default = COMMON[key][1] if key in COMMON else spec[key][1]
        flag = getattr(args, key, None)
        opts[key] = flag if flag is not None else doc.get(key, default)
    missing = [k for k in REQUIRED[args.command] if opts.get(k) in (None, [])]
    if missing:
        raise UsageError(f"{args.command} needs " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return opts


def _meta(command: str, opts: dict, **extra) -> dict:
    return report.metadata({"command": command, **opts}, opts["seed"], **extra)


def _load_data(path, fmt: str = "tsv", model: models.TrainedModel | None = None) -> data_mod.Dataset:
    if fmt == "conll":
        return data_mod.load_conll(path)
    if model is not None and model.config.head == "regressor":
        return data_mod.load_labeled_text(path, regression=True)
    names = list(model.label_names) if model is not None and model.label_names else None
    return data_mod.load_labeled_text(path, label_names=names)


# --------------------------------------------------------------- commands


def cmd_synth(o: dict) -> None:
    fields = {k: o[k] for k in ("n_examples", "vocab_size", "dim", "noise_sigma", "min_len", "max_len", "max_sentences", "scope_rate") if o[k] is not None}
    spec = data_mod.SyntheticSpec(kind=o["kind"], seed=o["seed"], **fields)
    table, dataset = data_mod.generate(spec)
    out = Path(o["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    save_text_embeddings(table, out / "embeddings.txt")
    ratios = [float(r) for r in str(o["ratios"]).split(",")]
    names = ["train", "dev", "test"][: len(ratios)] if len(ratios) <= 3 else [f"part{i}" for i in range(len(ratios))]
    for name, part in zip(names, data_mod.split(dataset, ratios, o["seed"])):
        data_mod.write_labeled_text(part, out / f"{name}.tsv")
    report.emit_json({"spec": spec.to_dict(), "label_names": dataset.label_names}, out / "spec.json", _meta("synth", o))


def cmd_train(o: dict) -> None:
    table = load_text_embeddings(o["embeddings"])
    train_set = _load_data(o["train"], o["format"])
    regression = o["head"] == "regressor"
    if regression:
        train_set = data_mod.load_labeled_text(o["train"], regression=True)
        dev_set = data_mod.load_labeled_text(o["dev"], regression=True)
    elif o["format"] == "conll":
        dev_set = data_mod.load_conll(o["dev"])
        names = sorted(set(train_set.label_names) | set(dev_set.label_names))
        train_set, dev_set = _relabel(train_set, names), _relabel(dev_set, names)
    else:
        dev_set = data_mod.load_labeled_text(o["dev"], label_names=train_set.label_names)
    config = models.ModelConfig(
        architecture=o["arch"],
        embedding_dim=table.dim,
        num_classes=max(2, train_set.num_classes) if not regression else 1,
        head=o["head"],
        hidden_size=o["hidden_size"],
        intermediate_layers=o["intermediate_layers"],
        window=o["window"],
        dropout_prob=o["dropout"],
        dropout_sites=o["dropout_sites"],
        trainable_embeddings=bool(o["trainable_embeddings"]),
        seed=o["seed"],
        learning_rate=o["lr"],
        batch_size=o["batch_size"],
        max_epochs=o["epochs"],
        patience=o["patience"],
    )
    model = models.train(config, table, train_set, dev_set)
    models.save(model, o["out"])
    print(json.dumps({"epochs": len(model.history), "dev_loss": min(h[2] for h in model.history)}))


def _relabel(ds: data_mod.Dataset, names) -> data_mod.Dataset:
    index = {n: i for i, n in enumerate(names)}
    old = ds.label_names
    examples = [
        data_mod.Example(ex.id, ex.tokens, None, tuple(index[old[t]] for t in ex.tags), ex.sentence_spans)
        for ex in ds
    ]
    return data_mod.Dataset(examples, list(names), ds.task_kind)


def cmd_eval(o: dict) -> None:
    model = models.load(o["model"])
    result = models.evaluate(model, _load_data(o["data"], o["format"], model))
    text = json.dumps(result, sort_keys=True)
    if o["out"]:
        report.emit_json({"evaluation": result}, o["out"], _meta("eval", o))
    print(text)


def _heatmap(path, rows, cols, matrix, log_scale: bool, meta) -> None:
    scale = "signed_log" if log_scale else "linear"
    report.emit_svg_heatmap(report.HeatmapData(rows, cols, matrix, scale), path, meta)


def cmd_importance(o: dict) -> None:
    model = models.load(o["model"])
    dataset = _load_data(o["data"], o["format"], model)
    meta = _meta("importance", o)
    if o["level"] == "dim":
        specs = [er.ErasureSpec.input_dim(d) for d in range(model.config.embedding_dim)]
    elif o["level"] == "unit":
        specs = [er.ErasureSpec.hidden_unit(o["layer"], u) for u in range(model.config.layer_width(o["layer"]))]
    else:
        tokens = sorted({t for ex in dataset for t in ex.tokens})
        specs = [er.ErasureSpec.word_type(t, o["word_mode"], bool(o["per_occurrence"])) for t in tokens]
    reports = []
    items = model.items(dataset)
    for spec in specs:
        try:
            reports.append(er.importance(model, items, spec))
        except er.EmptyPopulationError:
            continue
    report.emit_csv(reports, o["out"], meta)
    if o["detail"]:
        report.emit_detail_csv(reports, o["detail"], meta)
    if o["report"]:
        Path(o["report"]).write_text(report.report_document(reports, meta), encoding="utf-8")
    if o["heatmap"]:
        _heatmap(o["heatmap"], [Path(o["model"]).stem], [r.target for r in reports], [[r.I for r in reports]], o["log_scale"], meta)


def cmd_layer_importance(o: dict) -> None:
    model = models.load(o["model"])
    dataset = _load_data(o["data"], o["format"], model)
    layers = er.layer_importance(model, dataset)
    width = max(len(v) for v in layers.values())
    names = list(layers)
    matrix = np.full((len(names), width), np.nan)
    rows = []
    for i, name in enumerate(names):
        matrix[i, : len(layers[name])] = layers[name]
        rows.extend((name, j, float(v)) for j, v in enumerate(layers[name]))
    meta = _meta("layer-importance", o, concentration={n: er.concentration(v) for n, v in layers.items()})
    report.emit_table_csv(("layer", "index", "I"), rows, o["out"], meta)
    if o["heatmap"]:
        _heatmap(o["heatmap"], names, [str(j) for j in range(width)], matrix, o["log_scale"], meta)


def cmd_word_ranking(o: dict) -> None:
    model = models.load(o["model"])
    ranked = er.word_type_ranking(
        model, _load_data(o["data"], "tsv", model), o["top_k"], o["sign"], min_support=o["min_support"], word_mode=o["word_mode"]
    )
    rows = [(i + 1, w.token, w.importance, w.support) for i, w in enumerate(ranked)]
    report.emit_table_csv(("rank", "token", "I", "support"), rows, o["out"], _meta("word-ranking", o))


def _edges(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",")]
    except ValueError:
        raise UsageError(f"bucket edges must be comma-separated numbers, got {text!r}") from None


def cmd_histogram(o: dict) -> None:
    edges = _edges(o["edges"])
    # the end buckets also hold the values clamped from outside the edges
    bounds = ["-inf", *(f"{e:g}" for e in edges[1:-1]), "inf"]
    labels = [f"[{a}:{b})" for a, b in zip(bounds, bounds[1:])]
    rows = []
    for path in o["model"]:
        model = models.load(path)
        words = er.word_type_importances(model, _load_data(o["data"], "tsv", model), word_mode=o["word_mode"])
        counts = er.importance_histogram([w.importance for w in words], edges)
        rows.append([Path(path).stem, *counts])
    report.emit_table_csv(["model", *labels], rows, o["out"], _meta("histogram", o))


def cmd_freq_corr(o: dict) -> None:
    table: EmbeddingTable = load_text_embeddings(o["embeddings"])
    freqs = data_mod.load_labeled_text(o["freqs"], regression=True)
    logf = {ex.tokens[0]: float(ex.gold) for ex in freqs}
    fit = er.frequency_correlation(table, o["dim"], logf)
    result = {"dim": o["dim"], "slope": fit.slope, "intercept": fit.intercept, "r_squared": fit.r_squared, "n": fit.n}
    if o["out"]:
        report.emit_json({"fit": result}, o["out"], _meta("freq-corr", o))
    print(json.dumps(result, sort_keys=True))


def cmd_rl_train(o: dict) -> None:
    model = models.load(o["model"])
    config = rl.RLConfig(
        gamma=o["gamma"], rollouts_per_example=o["k"], epochs=o["epochs"],
        policy_lr=o["policy_lr"], baseline_lr=o["baseline_lr"], seed=o["seed"],
    )
    result = rl.train_policy(model, _load_data(o["data"], "tsv", model), config)
    rl.save_policy(result, o["out"])
    if result.curve:
        epoch, mean_r, flip = result.curve[-1]
        print(json.dumps({"epochs": epoch, "mean_reward": mean_r, "flip_rate": flip}))


def cmd_rl_apply(o: dict) -> None:
    model = models.load(o["model"])
    trained = rl.load_policy(o["policy"])
    examples = rl.prepare(model, _load_data(o["data"], "tsv", model), trained.config)
    rng = np.random.default_rng(o["seed"])
    results = [rl.apply_policy(trained.policy, model, ex, o["mode"], gamma=trained.config.gamma, rng=rng) for ex in examples]
    _write_records(o["out"], results, _meta("rl-apply", o))
    if o["render"]:
        _render_results(o["render"], results, model.label_names)


def _write_records(path, results, meta) -> None:
    head = "# " + json.dumps(meta, sort_keys=True) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(head + rl.records_text(results))


def _render_results(path, results, names) -> None:
    lines = [report.erasure_text(r.tokens, r.removed, r.label_before, r.label_after, names) for r in results]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(f"{r.id}\t{line}\n" for r, line in zip(results, lines)))


def cmd_oracle(o: dict) -> None:
    model = models.load(o["model"])
    examples = rl.prepare(model, _load_data(o["data"], "tsv", model))
    results, over = [], []
    for ex in examples:
        try:
            found = rl.brute_force_minimal(model, ex, o["max_n"])
        except rl.BudgetError:
            over.append(ex.id)
            continue
        if found is None:
            results.append(rl.ErasureResult(ex.id, ex.label, ex.label, (), (), 0.0, 0, False, ex.tokens))
        else:
            results.append(
                rl.ErasureResult(
                    ex.id, found.label_before, found.label_after, found.D,
                    tuple(ex.tokens[t] for t in found.D), 1.0 / len(found.D), len(found.D), True, ex.tokens,
                )
            )
    if over:
        log.warning("skipped %d examples longer than max_n=%d", len(over), o["max_n"])
    _write_records(o["out"], results, _meta("oracle", o, over_budget=over))
    flips = sum(r.flipped for r in results)
    print(json.dumps({"examples": len(examples), "solved": len(results), "flippable": flips, "over_budget": len(over)}))


def _read_records(path) -> list[dict]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            out.append(json.loads(line))
    return out


def cmd_render(o: dict) -> None:
    meta = _meta("render", o)
    if o["csv"]:
        import csv

        with open(o["csv"], encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
        if not rows:
            raise er.EmptyPopulationError(f"{o['csv']} has no data rows")
        if "layer" in rows[0]:
            names = list(dict.fromkeys(r["layer"] for r in rows))
            width = max(int(r["index"]) for r in rows) + 1
            matrix = np.full((len(names), width), np.nan)
            for r in rows:
                matrix[names.index(r["layer"]), int(r["index"])] = float(r["I"])
            _heatmap(o["out"], names, [str(j) for j in range(width)], matrix, o["log_scale"], meta)
        else:
            _heatmap(o["out"], [Path(o["csv"]).stem], [r["target"] for r in rows], [[float(r["I"]) for r in rows]], o["log_scale"], meta)
        return
    if not (o["records"] and o["data"]):
        raise UsageError("render needs --csv, or --records with --data")
    model = models.load(o["model"]) if o["model"] else None
    dataset = _load_data(o["data"], "tsv", model)
    by_id = {ex.id: ex for ex in dataset}
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    names = model.label_names if model else dataset.label_names
    for rec in _read_records(o["records"]):
        ex = by_id[rec["id"]]
        report.render_erasure(ex.tokens, rec["removed"], (rec["label_before"], rec["label_after"]), out / f"{rec['id']}.txt", names, meta)


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "importance": cmd_importance,
    "layer-importance": cmd_layer_importance,
    "word-ranking": cmd_word_ranking,
    "histogram": cmd_histogram,
    "freq-corr": cmd_freq_corr,
    "rl-train": cmd_rl_train,
    "rl-apply": cmd_rl_apply,
    "oracle": cmd_oracle,
    "render": cmd_render,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(args)
        HANDLERS[args.command](opts)
    except UsageError as exc:
        print(f"error: UsageError: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError, KeyError, IndexError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
