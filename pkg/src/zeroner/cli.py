"""Command-line interface: train, eval, predict and score.

Runs are driven by a flat key=value config file with flag overrides
(defaults < file < flags); every command writes its resolved configuration
next to its outputs so any run can be replayed. Exit codes: 0 success,
1 usage, 2 data error, 3 runtime error.
"""

import argparse
import concurrent.futures
import json
import os
import sys
import time
from dataclasses import fields

from . import corpus, evaluation, experts, model

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

PATH_KEYS = ("train", "dev", "test", "vectors", "checkpoint", "out")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config_types():
    defaults = model.TrainConfig()
    types = {f.name: type(getattr(defaults, f.name))
             for f in fields(model.TrainConfig)}
    types.update({key: str for key in PATH_KEYS})
    types["column"] = int
    return types


CONFIG_TYPES = _config_types()


def _parse_value(key, raw):
    kind = CONFIG_TYPES[key]
    if kind is bool:
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise UsageError("config key %r expects a boolean, got %r" % (key, raw))
    try:
        return kind(raw.strip())
    except ValueError:
        raise UsageError("config key %r expects %s, got %r"
                         % (key, kind.__name__, raw))


def read_config_file(path):
    """Parse a flat 'key = value' config file. Unknown keys are rejected."""
    out = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError("config line %d: expected 'key = value'" % lineno)
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in CONFIG_TYPES:
                raise UsageError("config line %d: unknown key %r" % (lineno, key))
            out[key] = _parse_value(key, value)
    return out


def resolve_config(ns):
    """Merge defaults, config file and command-line flags (flags win)."""
    resolved = {f.name: getattr(model.TrainConfig(), f.name)
                for f in fields(model.TrainConfig)}
    resolved.update({key: None for key in PATH_KEYS})
    resolved["column"] = -1
    if getattr(ns, "config", None):
        resolved.update(read_config_file(ns.config))
    for key in CONFIG_TYPES:
        value = getattr(ns, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def write_resolved(resolved, out_dir):
    lines = ["%s = %s" % (key, _format_value(resolved[key]))
             for key in sorted(resolved) if resolved[key] is not None]
    with open(os.path.join(out_dir, "config.resolved"), "w",
              encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")


def _train_config(resolved):
    names = {f.name for f in fields(model.TrainConfig)}
    return model.TrainConfig(**{k: v for k, v in resolved.items()
                                if k in names})


def _require(resolved, key, command):
    if not resolved.get(key):
        raise UsageError("%s requires a %r path (flag --%s or config key)"
                         % (command, key, key))
    return resolved[key]


def _load_training_data(resolved):
    train_path = resolved["train"]
    column = resolved["column"]
    raw = corpus.read_raw(train_path, column)
    if not raw:
        raise corpus.CorpusError("no sentences in %s" % train_path)
    scheme = corpus.TagScheme.from_tags(t for _, tags in raw for t in tags)
    train_sents = corpus.read_conll(train_path, scheme, column)
    dev_sents = corpus.read_conll(resolved["dev"], scheme, column) \
        if resolved.get("dev") else None
    vectors = corpus.load_vectors(resolved["vectors"]) \
        if resolved.get("vectors") else None
    return scheme, train_sents, dev_sents, vectors


def run_training(resolved, out_dir):
    """One full training run; writes checkpoint, metrics log and resolved
    config into out_dir and returns the best validation F1."""
    os.makedirs(out_dir, exist_ok=True)
    write_resolved(resolved, out_dir)
    scheme, train_sents, dev_sents, vectors = _load_training_data(resolved)
    config = _train_config(resolved)

    clock = [time.perf_counter()]

    def progress(record):
        now = time.perf_counter()
        print("epoch %3d  total %.4f  val_f1 %6.2f  (%.1fs)"
              % (record["epoch"], record["total"], record["val_f1"],
                 now - clock[0]), file=sys.stderr)
        clock[0] = now

    trained, history = model.train(train_sents, dev_sents, scheme, config,
                                   vectors=vectors, progress=progress)
    model.save(trained, os.path.join(out_dir, "checkpoint.bin"))
    with open(os.path.join(out_dir, "metrics.jsonl"), "w",
              encoding="utf-8") as handle:
        for record in history:
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    return max(record["val_f1"] for record in history)


def _replica(payload):
    resolved, out_dir = payload
    best = run_training(resolved, out_dir)
    return resolved["seed"], best


def cmd_train(ns):
    resolved = resolve_config(ns)
    _require(resolved, "train", "train")
    out_dir = _require(resolved, "out", "train")
    if ns.seeds is None or ns.seeds <= 1:
        best = run_training(resolved, out_dir)
        print("best val_f1 %.2f" % best)
        return EXIT_OK
    jobs = []
    for offset in range(ns.seeds):
        replica = dict(resolved)
        replica["seed"] = resolved["seed"] + offset
        jobs.append((replica, os.path.join(out_dir, "seed%d" % replica["seed"])))
    os.makedirs(out_dir, exist_ok=True)
    with concurrent.futures.ProcessPoolExecutor(
            max_workers=min(ns.seeds, os.cpu_count() or 1)) as pool:
        results = dict(pool.map(_replica, jobs))
    scores = [results[seed] for seed in sorted(results)]
    summary = {"per_seed": {str(s): results[s] for s in sorted(results)},
               "median_val_f1": sorted(scores)[len(scores) // 2]}
    with open(os.path.join(out_dir, "seeds.json"), "w",
              encoding="utf-8") as handle:
        handle.write(json.dumps(summary, sort_keys=True) + "\n")
    for seed in sorted(results):
        print("seed %d  best val_f1 %.2f" % (seed, results[seed]))
    print("median val_f1 %.2f" % summary["median_val_f1"])
    return EXIT_OK


def cmd_eval(ns):
    resolved = resolve_config(ns)
    checkpoint = _require(resolved, "checkpoint", "eval")
    test_path = _require(resolved, "test", "eval")
    out_dir = resolved.get("out") or "."
    os.makedirs(out_dir, exist_ok=True)
    tagger = model.load(checkpoint)
    sentences = corpus.read_conll(test_path, tagger.scheme, resolved["column"])
    if not sentences:
        raise corpus.CorpusError("no sentences in %s" % test_path)
    predictions = [tags for tags, _ in tagger.predict(sentences)]
    report = evaluation.f1([s.tags_task2 for s in sentences], predictions,
                           tagger.scheme)
    write_resolved(resolved, out_dir)
    pred_path = os.path.join(out_dir, "predictions.conll")
    corpus.write_tagged(pred_path, [
        (s.tokens, [tagger.scheme.task2_tags[t] for t in tags])
        for s, tags in zip(sentences, predictions)])
    with open(os.path.join(out_dir, "report.txt"), "w",
              encoding="utf-8") as handle:
        handle.write("seed = %d\n%s\n"
                     % (tagger.config.seed, report.to_text()))
    with open(os.path.join(out_dir, "report.json"), "w",
              encoding="utf-8") as handle:
        data = json.loads(report.to_json())
        data["seed"] = tagger.config.seed
        handle.write(json.dumps(data, sort_keys=True) + "\n")
    print(report.to_text())
    return EXIT_OK


def cmd_predict(ns):
    resolved = resolve_config(ns)
    checkpoint = _require(resolved, "checkpoint", "predict")
    if not ns.input:
        raise UsageError("predict requires --input")
    out_dir = resolved.get("out") or "."
    os.makedirs(out_dir, exist_ok=True)
    tagger = model.load(checkpoint)
    blocks = corpus.read_tokens(ns.input)
    if not blocks:
        raise corpus.CorpusError("no sentences in %s" % ns.input)
    decoded = [tagger.decode_sentence(tokens) for tokens, _ in blocks]
    write_resolved(resolved, out_dir)
    pred_path = os.path.join(out_dir, "predictions.conll")
    corpus.write_tagged(pred_path, [
        (tokens, [tagger.scheme.task2_tags[t] for t in tags])
        for (tokens, _), (tags, _) in zip(blocks, decoded)])
    if ns.gate:
        if tagger.bank is None:
            raise UsageError("--gate needs a checkpoint trained with the "
                             "expert module (use_moee)")
        sentences = []
        for (tokens, gold), (tags, alpha) in zip(blocks, decoded):
            if gold is None:
                gold = [None] * len(tokens)
            gold = [g if g is not None else "-" for g in gold]
            rows = [(tok, g, tagger.scheme.task2_tags[t], alpha[i])
                    for i, (tok, g, t) in enumerate(zip(tokens, gold, tags))]
            sentences.append(rows)
        experts.write_gate_tsv(os.path.join(out_dir, "gate.tsv"), sentences,
                               tagger.scheme.expert_categories)
    return EXIT_OK


def cmd_score(ns):
    if not ns.gold or not ns.pred:
        raise UsageError("score requires --gold and --pred")
    report, _ = evaluation.score_files(ns.gold, ns.pred)
    print(report.to_text())
    if ns.out:
        os.makedirs(ns.out, exist_ok=True)
        write_resolved(resolve_config(ns), ns.out)
        with open(os.path.join(ns.out, "report.json"), "w",
                  encoding="utf-8") as handle:
            handle.write(report.to_json() + "\n")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="zeroner",
                     description="Zero-resource cross-domain NER tagger")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")

    p_train = sub.add_parser("train", help="train a model")
    shared(p_train)
    p_train.add_argument("--train", default=None, help="training CoNLL file")
    p_train.add_argument("--dev", default=None, help="validation CoNLL file")
    p_train.add_argument("--vectors", default=None,
                         help="pretrained vectors (text format)")
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--patience", type=int, default=None)
    p_train.add_argument("--batch-size", dest="batch_size", type=int,
                         default=None)
    p_train.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p_train.add_argument("--dropout", type=float, default=None)
    p_train.add_argument("--hidden-size", dest="hidden_size", type=int,
                         default=None)
    p_train.add_argument("--no-mtl", dest="use_mtl", action="store_const",
                         const=False, default=None,
                         help="drop the entity-detection auxiliary task")
    p_train.add_argument("--no-moee", dest="use_moee", action="store_const",
                         const=False, default=None,
                         help="drop the mixture of entity experts")
    p_train.add_argument("--freeze-embeddings", dest="freeze_embeddings",
                         action="store_const", const=True, default=None)
    p_train.add_argument("--unfreeze-embeddings", dest="freeze_embeddings",
                         action="store_const", const=False)
    p_train.add_argument("--seeds", type=int, default=None,
                         help="run N replicas on consecutive seeds")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    shared(p_eval)
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--test", default=None, help="annotated CoNLL file")
    p_eval.set_defaults(func=cmd_eval)

    p_predict = sub.add_parser("predict", help="tag a file")
    shared(p_predict)
    p_predict.add_argument("--checkpoint", default=None)
    p_predict.add_argument("--input", default=None,
                           help="token-only or annotated CoNLL file")
    p_predict.add_argument("--gate", action="store_true",
                           help="also export gate confidences as TSV")
    p_predict.set_defaults(func=cmd_predict)

    p_score = sub.add_parser("score", help="score predictions against gold")
    shared(p_score)
    p_score.add_argument("--gold", default=None)
    p_score.add_argument("--pred", default=None)
    p_score.set_defaults(func=cmd_score)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        return ns.func(ns)
    except UsageError as err:
        print("usage error: %s" % err, file=sys.stderr)
        return EXIT_USAGE
    except (corpus.CorpusError, evaluation.AlignmentError,
            model.CheckpointError, FileNotFoundError, IsADirectoryError,
            NotADirectoryError) as err:
        print("data error: %s" % err, file=sys.stderr)
        return EXIT_DATA
    except model.TrainingDivergedError as err:
        print("runtime error: %s" % err, file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print("runtime error: %s: %s" % (type(err).__name__, err),
              file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
