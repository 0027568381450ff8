"""Command line front end: ``distillforge <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .decode import Translator, translate_corpus
from .distill import DatasetRecipe, build_recipe, write_recipe
from .eval import corpus_bleu
from .harness import (
    TABLE3_RECIPES,
    DeskScale,
    ExperimentConfig,
    Workspace,
    emit_tables_and_curves,
    grid_search,
    run_experiment,
    run_pipeline,
)
from .model import Seq2SeqConfig
from .synth import SyntheticTaskSpec, generate_bitext, write_task
from .textproc import Codec, read_bitext
from .train import TrainConfig, train_loop

logger = logging.getLogger("distillforge")


def _dropout_rate(text: str) -> float:
    """Accept ``0.1`` or the encoder:decoder form ``0.1:0.1`` (both sides must agree)."""
    parts = [float(p) for p in text.split(":")]
    if len(set(parts)) != 1:
        raise argparse.ArgumentTypeError("encoder and decoder dropout must be equal")
    return parts[0]


def _add_model_args(p: argparse.ArgumentParser) -> None:
    d = Seq2SeqConfig()
    p.add_argument("--bpe", "--bpe-merges", dest="bpe_merges", type=int, default=d.bpe_merges)
    p.add_argument("--num-embed", type=int, default=d.embed_size)
    p.add_argument("--num-hidden", "--rnn-num-hidden", dest="num_hidden", type=int, default=d.hidden_size)
    p.add_argument("--num-layers", type=int, default=d.num_layers)
    p.add_argument("--rnn-cell-type", choices=["lstm", "gru"], default=d.cell_type)
    p.add_argument("--rnn-dropout-inputs", type=_dropout_rate, default=d.rnn_dropout_inputs)
    p.add_argument("--rnn-dropout-states", type=_dropout_rate, default=d.rnn_dropout_states)
    p.add_argument("--embed-dropout", type=_dropout_rate, default=d.embed_dropout)
    p.add_argument("--max-seq-len", type=int, default=d.max_seq_len)


def _add_train_args(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--initial-learning-rate", type=float, default=d.initial_learning_rate)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--batch-type", choices=["word"], default="word")
    p.add_argument("--optimizer", choices=["adam"], default=d.optimizer)
    p.add_argument("--gradient-clipping-threshold", type=float, default=d.gradient_clipping_threshold)
    p.add_argument("--gradient-clipping-type", choices=["abs"], default=d.gradient_clipping_type)
    p.add_argument("--label-smoothing", type=float, default=d.label_smoothing)
    p.add_argument("--checkpoint-frequency", type=int, default=d.checkpoint_frequency)
    p.add_argument("--max-checkpoints", type=int, default=d.max_checkpoints)
    p.add_argument("--learning-rate-reduce-factor", type=float, default=d.learning_rate_reduce_factor)
    p.add_argument("--learning-rate-reduce-num-not-improved", type=int, default=d.learning_rate_reduce_num_not_improved)
    p.add_argument("--keep-last-params", type=int, default=d.keep_last_params)
    p.add_argument("--word-kd-alpha", type=float, default=d.word_kd_alpha)
    p.add_argument("--seed", type=int, default=d.seed)


def _model_config(a) -> Seq2SeqConfig:
    return Seq2SeqConfig(bpe_merges=a.bpe_merges, embed_size=a.num_embed, hidden_size=a.num_hidden, num_layers=a.num_layers,
                         cell_type=a.rnn_cell_type, rnn_dropout_inputs=a.rnn_dropout_inputs,
                         rnn_dropout_states=a.rnn_dropout_states, embed_dropout=a.embed_dropout, max_seq_len=a.max_seq_len)


def _train_config(a) -> TrainConfig:
    return TrainConfig(initial_learning_rate=a.initial_learning_rate, batch_size=a.batch_size, optimizer=a.optimizer,
                       gradient_clipping_threshold=a.gradient_clipping_threshold,
                       gradient_clipping_type=a.gradient_clipping_type, label_smoothing=a.label_smoothing,
                       checkpoint_frequency=a.checkpoint_frequency, max_checkpoints=a.max_checkpoints,
                       learning_rate_reduce_factor=a.learning_rate_reduce_factor,
                       learning_rate_reduce_num_not_improved=a.learning_rate_reduce_num_not_improved,
                       keep_last_params=a.keep_last_params, word_kd_alpha=a.word_kd_alpha, seed=a.seed)


def cmd_synth(a) -> int:
    spec = SyntheticTaskSpec.load(a.spec) if a.spec else SyntheticTaskSpec()
    if a.seed is not None:
        spec = SyntheticTaskSpec.from_dict({**spec.to_dict(), "seed": a.seed})
    sizes = {"train": a.n, "valid": a.valid_n or max(1, a.n // 20), "test": a.test_n or max(1, a.n // 20)}
    corpora = generate_bitext(spec, sizes)
    write_task(spec.task, corpora, a.out_dir)
    print(f"wrote {sizes} to {a.out_dir}")
    return 0


def cmd_train(a) -> int:
    model, train = _model_config(a), _train_config(a)
    train_bt = read_bitext(a.train, max_seq_len=model.max_seq_len)
    valid_bt = read_bitext(a.valid, name="valid")
    src = Codec.fit(train_bt.sources, model.bpe_merges)
    trg = Codec.fit(train_bt.targets, model.bpe_merges)
    teacher = Translator.load(a.teacher).params if a.teacher else None
    result = train_loop(model, train, train_bt, valid_bt, src, trg, a.out_dir, teacher=teacher)
    print(f"best checkpoint {result.best_checkpoint} after {result.updates} updates; model in {Path(a.out_dir) / 'best'}")
    return 0


def cmd_translate(a) -> int:
    translator = Translator.load(a.checkpoint)
    lines = Path(a.input).read_text(encoding="utf-8").splitlines()
    out = translate_corpus(translator, lines, a.beam_size, nbest=a.nbest, length_norm=not a.no_length_norm,
                           workers=a.workers, out=a.output)
    if out.failures:
        print(f"{len(out.failures)} sentence(s) failed and were written as empty lines", file=sys.stderr)
    return 0


def cmd_distill(a) -> int:
    recipe = DatasetRecipe.parse(a.recipe, a.beam_size)
    base = read_bitext(a.train)
    teacher = Translator.load(a.teacher) if a.teacher else None
    reverse = Translator.load(a.reverse_teacher) if a.reverse_teacher else None
    built = build_recipe(recipe, base, teacher, reverse, workers=a.workers)
    path = write_recipe(built, a.out_dir, a.teacher, a.reverse_teacher, {"beam_size": a.beam_size})
    print(f"{recipe.name}: {len(built.bitext)} pairs, manifest {path}")
    return 0


def cmd_score(a) -> int:
    hyps = Path(a.hyp).read_text(encoding="utf-8").splitlines()
    refs = Path(a.ref).read_text(encoding="utf-8").splitlines()
    report = corpus_bleu(hyps, refs)
    print(report.to_tsv())
    print(report)
    return 0


def _load_json(path: str) -> dict:
    return json.loads(Path(path).read_text())


def cmd_experiment(a) -> int:
    cfg = _load_json(a.config)
    if cfg.get("pipeline"):
        task = cfg.get("task", {})
        task = task if "train" in task else SyntheticTaskSpec.from_dict(task)
        results = run_pipeline(task, cfg.get("budget"), a.out_dir, DeskScale.from_dict(cfg.get("desk", {})),
                               cfg.get("trials", (1, 2, 3)), cfg.get("recipes", TABLE3_RECIPES),
                               cfg.get("sizes", ("SMALL", "LARGE")))
        failed = [r.config.cell_id for r in results if not r.row.complete]
    else:
        exp = ExperimentConfig.from_dict(cfg)
        ws = Workspace(exp.task, exp.desk, Path(a.out_dir) / "teachers")
        res = run_experiment(exp, ws, a.out_dir)
        emit_tables_and_curves(a.out_dir)
        print("\t".join(res.row.table1()))
        failed = [exp.cell_id] if not res.row.complete else []
    if failed:
        print(f"failed cells: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_grid(a) -> int:
    cfg = _load_json(a.config)
    task = cfg.get("task", {})
    task = task if "train" in task else SyntheticTaskSpec.from_dict(task)
    desk = DeskScale.from_dict(cfg.get("desk", {}))
    grid = cfg.get("grid", {"bpe_merges": [10000, 750, 500], "hidden_size": [64, 128, 256]})
    ws = Workspace(task, desk, Path(a.out_dir) / "teachers")
    points = grid_search(grid, cfg.get("variants", ("base", "base+kd")), ws, seed=cfg.get("seed", 1), out_dir=a.out_dir)
    for p in points:
        print("\t".join(str(x) for x in asdict(p).values()))
    return 1 if any(p.error for p in points) else 0


def cmd_report(a) -> int:
    files = emit_tables_and_curves(a.results_dir)
    for name, path in files.items():
        print(f"{name}\t{path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distillforge", description="Sequence-level distillation experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic task")
    p.add_argument("--spec")
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--valid-n", type=int)
    p.add_argument("--test-n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--train", required=True, help="corpus prefix (<prefix>.src / <prefix>.trg)")
    p.add_argument("--valid", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--teacher", help="checkpoint for word-level KD")
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="beam-translate a file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--beam-size", type=int, default=5)
    p.add_argument("--nbest", type=int, default=1)
    p.add_argument("--no-length-norm", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("distill", help="build a training corpus from a recipe")
    p.add_argument("--recipe", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--teacher")
    p.add_argument("--reverse-teacher")
    p.add_argument("--beam-size", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("score", help="corpus BLEU")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.set_defaults(func=cmd_score)

    for name, func, help_ in (("experiment", cmd_experiment, "run a cell or the full pipeline"),
                              ("grid", cmd_grid, "architecture grid search")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--out-dir", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="write tables and curves from a results directory")
    p.add_argument("--results-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
