"""Experiment orchestration: teachers, student cells, grids, and report files."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .decode import Translator, translate_corpus
from .distill import DatasetRecipe, build_recipe
from .eval import aggregate_trials, corpus_bleu
from .model import PRESETS, Seq2SeqConfig, count_params
from .synth import SyntheticTaskSpec, generate_bitext
from .textproc import Bitext, Codec, corpus_stats, read_bitext
from .train import TrainConfig, encode_bitext, perplexity, train_loop, write_metrics

logger = logging.getLogger(__name__)

TABLE1_RECIPES = ("base", "kd", "base+kd")
TABLE3_RECIPES = ("base", "kd", "base+kd", "base+kd+bt", "base+best-2")
DROPOUT_ON = 0.1


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class DeskScale:
    """Model and budget choices for running the experiment matrix on a laptop.

    ``large`` doubles as the teacher architecture and the same-size student;
    ``small`` is the reduced student.  Budgets count checkpoints of
    ``train.checkpoint_frequency`` updates each.
    """

    large: Seq2SeqConfig = Seq2SeqConfig(bpe_merges=1000, embed_size=128, hidden_size=128)
    small: Seq2SeqConfig = Seq2SeqConfig(bpe_merges=100, embed_size=48, hidden_size=48)
    train: TrainConfig = TrainConfig(initial_learning_rate=0.003, batch_size=500, checkpoint_frequency=100,
                                     max_checkpoints=30)
    teacher_train: TrainConfig = TrainConfig(initial_learning_rate=0.003, batch_size=1000, checkpoint_frequency=200,
                                             max_checkpoints=10)
    sizes: tuple[int, int, int] = (20000, 500, 1000)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DeskScale":
        base = cls()
        return cls(
            large=Seq2SeqConfig.from_dict({**asdict(base.large), **d.get("large", {})}),
            small=Seq2SeqConfig.from_dict({**asdict(base.small), **d.get("small", {})}),
            train=TrainConfig.from_dict({**asdict(base.train), **d.get("train", {})}),
            teacher_train=TrainConfig.from_dict({**asdict(base.teacher_train), **d.get("teacher_train", {})}),
            sizes=tuple(d.get("sizes", base.sizes)),
        )


FULL_SCALE = DeskScale(
    large=PRESETS["LARGE"],
    small=PRESETS["SMALL"],
    train=TrainConfig(max_checkpoints=30),
    teacher_train=TrainConfig(max_checkpoints=100),
)


@dataclass(frozen=True)
class ExperimentConfig:
    """One cell of the experiment matrix, run for every seed in ``trials``."""

    task: SyntheticTaskSpec | dict = field(default_factory=SyntheticTaskSpec)
    model: str | Seq2SeqConfig = "SMALL"
    recipe: str = "base"
    dropout: bool = True
    budget: int | None = None
    trials: tuple[int, ...] = (1, 2, 3)
    beam: int = 5
    desk: DeskScale = field(default_factory=DeskScale)
    record_wall_time: bool = True

    def __post_init__(self):
        object.__setattr__(self, "recipe", DatasetRecipe.parse(self.recipe, self.beam).name)
        object.__setattr__(self, "trials", tuple(int(s) for s in self.trials))
        if not self.trials:
            raise ValueError("need at least one trial seed")

    @property
    def size(self) -> str:
        return self.model if isinstance(self.model, str) else "custom"

    def model_config(self) -> Seq2SeqConfig:
        if isinstance(self.model, Seq2SeqConfig):
            cfg = self.model
        elif self.model == "SMALL":
            cfg = self.desk.small
        elif self.model == "LARGE":
            cfg = self.desk.large
        else:
            raise ValueError(f"unknown model preset {self.model!r}")
        p = DROPOUT_ON if self.dropout else 0.0
        return replace(cfg, rnn_dropout_inputs=p, rnn_dropout_states=p)

    def train_config(self, seed: int) -> TrainConfig:
        budget = self.budget if self.budget is not None else self.desk.train.max_checkpoints
        return replace(self.desk.train, max_checkpoints=budget, seed=seed, valid_beam_size=self.beam)

    @property
    def cell_id(self) -> str:
        budget = self.budget if self.budget is not None else self.desk.train.max_checkpoints
        return f"{self.size}-{self.recipe}-{'dropout' if self.dropout else 'nodropout'}-ck{budget}"

    def to_dict(self) -> dict:
        task = self.task.to_dict() if isinstance(self.task, SyntheticTaskSpec) else dict(self.task)
        model = self.model if isinstance(self.model, str) else asdict(self.model)
        return {"task": task, "model": model, "recipe": self.recipe, "dropout": self.dropout, "budget": self.budget,
                "trials": list(self.trials), "beam": self.beam, "desk": self.desk.to_dict(),
                "record_wall_time": self.record_wall_time}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        task = d.get("task", {})
        task = task if "train" in task else SyntheticTaskSpec.from_dict(task)
        model = d.get("model", "SMALL")
        model = model if isinstance(model, str) else Seq2SeqConfig.from_dict(model)
        return cls(task=task, model=model, recipe=d.get("recipe", "base"), dropout=bool(d.get("dropout", True)),
                   budget=d.get("budget"), trials=tuple(d.get("trials", (1, 2, 3))), beam=int(d.get("beam", 5)),
                   desk=DeskScale.from_dict(d.get("desk", {})), record_wall_time=bool(d.get("record_wall_time", True)))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- shared task state


class Workspace:
    """Corpora, teachers and distilled datasets for one task, built lazily and cached."""

    def __init__(self, task: SyntheticTaskSpec | dict, desk: DeskScale | None = None, root: str | Path | None = None):
        self.task = task
        self.desk = desk or DeskScale()
        self.root = Path(root) if root is not None else None
        self._corpora: dict[str, Bitext] | None = None
        self._teachers: dict[str, Translator] = {}
        self.teacher_metrics: dict[str, list[dict]] = {}
        self.cache: dict = {}

    @property
    def corpora(self) -> dict[str, Bitext]:
        if self._corpora is None:
            if isinstance(self.task, SyntheticTaskSpec):
                n_train, n_valid, n_test = self.desk.sizes
                self._corpora = generate_bitext(self.task, {"train": n_train, "valid": n_valid, "test": n_test})
                self._corpora["train"] = self._corpora["train"].renamed("base")
            else:
                self._corpora = {k: read_bitext(self.task[k], name="base" if k == "train" else k) for k in ("train", "valid", "test")}
        return self._corpora

    @property
    def train(self) -> Bitext:
        return self.corpora["train"]

    def teacher(self, reverse: bool = False) -> Translator:
        key = "reverse" if reverse else "forward"
        if key not in self._teachers:
            path = self.root / f"teacher-{key}" / "best" if self.root is not None else None
            if path is not None and (path / "params.bin").exists():
                self._teachers[key] = Translator.load(path)
            else:
                self._teachers[key] = self._train_teacher(key, reverse)
        return self._teachers[key]

    def _train_teacher(self, key: str, reverse: bool) -> Translator:
        train, valid = self.corpora["train"], self.corpora["valid"]
        if reverse:
            train, valid = train.swapped(), valid.swapped()
        cfg = self.desk.large
        src = Codec.fit(train.sources, cfg.bpe_merges)
        trg = Codec.fit(train.targets, cfg.bpe_merges)
        out = self.root / f"teacher-{key}" if self.root is not None else None
        logger.info("training %s teacher", key)
        result = train_loop(cfg, self.desk.teacher_train, train, valid, src, trg, out)
        self.teacher_metrics[key] = result.metrics
        return result.translator

    def dataset(self, recipe: str, beam: int = 5) -> Bitext:
        r = DatasetRecipe.parse(recipe, beam)
        teacher = self.teacher() if r.needs_teacher else None
        reverse = self.teacher(reverse=True) if r.needs_reverse_teacher else None
        cache = self.cache.setdefault(beam, {})
        return build_recipe(r, self.train, teacher, reverse, cache=cache).bitext


# ---------------------------------------------------------------- cells


@dataclass
class ResultRow:
    dataset: str
    dropout: bool
    size: str
    bleu: tuple[float, ...]
    mean_bleu: float
    mean_train_ppl: float
    seeds: tuple[int, ...]
    budget_updates: tuple[int, ...] = ()
    convergence: tuple[int, ...] = ()
    failed_seeds: tuple[int, ...] = ()
    train_ppl: tuple[float, ...] = ()

    @property
    def complete(self) -> bool:
        return not self.failed_seeds

    def table1(self) -> list[str]:
        return aggregate_trials(self.bleu, self.seeds).row(self.dataset)

    def table3(self) -> list[str]:
        return [self.dataset, self.size, "on" if self.dropout else "off", f"{self.mean_bleu:.2f}", f"{self.mean_train_ppl:.2f}"]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    row: ResultRow
    metrics: dict[int, list[dict]]
    stats: dict[str, int]
    valid_best: dict[int, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"config": self.config.to_dict(), "cell": self.config.cell_id, "row": asdict(self.row),
                "stats": self.stats, "metrics": {str(k): v for k, v in self.metrics.items()},
                "valid_best": {str(k): v for k, v in self.valid_best.items()}}


def convergence_checkpoint(curve: Sequence[float], fraction: float = 0.95) -> int:
    """First (1-based) checkpoint whose value reaches ``fraction`` of the final one."""
    if not curve:
        raise ValueError("empty curve")
    target = fraction * curve[-1]
    return next(i + 1 for i, v in enumerate(curve) if v >= target)


def run_experiment(config: ExperimentConfig, workspace: Workspace | None = None, out_dir: str | Path | None = None) -> ExperimentResult:
    """Train one student per trial seed on the recipe corpus and score it on test."""
    ws = workspace or Workspace(config.task, config.desk)
    data = ws.dataset(config.recipe, config.beam)
    model_cfg = config.model_config()
    cell_dir = Path(out_dir) / config.cell_id if out_dir is not None else None
    src = Codec.fit(data.sources, model_cfg.bpe_merges)
    trg = Codec.fit(data.targets, model_cfg.bpe_merges)
    test = ws.corpora["test"]
    bleus, ppls, seeds, updates, conv, failed = [], [], [], [], [], []
    metrics, valid_best = {}, {}
    for seed in config.trials:
        trial_dir = cell_dir / f"trial{seed}" if cell_dir is not None else None
        try:
            res = train_loop(model_cfg, config.train_config(seed), data, ws.corpora["valid"], src, trg, trial_dir,
                             log_timing=config.record_wall_time)
        except Exception:
            logger.exception("%s: trial %d failed", config.cell_id, seed)
            failed.append(seed)
            continue
        hyps = translate_corpus(res.translator, test.sources, config.beam).best
        bleus.append(corpus_bleu(hyps, test.targets).bleu)
        pairs, _ = encode_bitext(data, src, trg, model_cfg.max_seq_len)
        ppls.append(perplexity(res.params, pairs))
        seeds.append(seed)
        updates.append(res.updates)
        conv.append(convergence_checkpoint([m["valid_bleu"] for m in res.metrics]))
        metrics[seed] = res.metrics
        valid_best[seed] = max(m["valid_bleu"] for m in res.metrics)
    mean = lambda xs: math.fsum(xs) / len(xs) if xs else float("nan")
    row = ResultRow(config.recipe, config.dropout, config.size, tuple(bleus), mean(bleus), mean(ppls), tuple(seeds),
                    tuple(updates), tuple(conv), tuple(failed), tuple(ppls))
    result = ExperimentResult(config, row, metrics, corpus_stats(data), valid_best)
    if cell_dir is not None:
        cell_dir.mkdir(parents=True, exist_ok=True)
        (cell_dir / "result.json").write_text(json.dumps(result.to_json(), indent=2) + "\n")
    return result


def table3_cells(budget: int | None = None, trials: Sequence[int] = (1, 2, 3), recipes: Sequence[str] = TABLE3_RECIPES,
                 sizes: Sequence[str] = ("SMALL", "LARGE")) -> list[tuple[str, str, bool]]:
    """(size, recipe, dropout) for every reported cell; large students only run with dropout."""
    cells = []
    for size in sizes:
        for dropout in (True, False):
            if size == "LARGE" and not dropout:
                continue
            cells.extend((size, r, dropout) for r in recipes)
    return cells


def run_pipeline(task: SyntheticTaskSpec | dict, budget: int | None = None, out_dir: str | Path | None = None,
                 desk: DeskScale | None = None, trials: Sequence[int] = (1, 2, 3), recipes: Sequence[str] = TABLE3_RECIPES,
                 sizes: Sequence[str] = ("SMALL", "LARGE"), workspace: Workspace | None = None) -> list[ExperimentResult]:
    """Teachers, distilled corpora, then every cell of the matrix.

    A non-default ``budget`` (longer training) reruns only the small cells.
    """
    desk = desk or DeskScale()
    ws = workspace or Workspace(task, desk, Path(out_dir) / "teachers" if out_dir is not None else None)
    ws.teacher()
    if any(DatasetRecipe.parse(r).needs_reverse_teacher for r in recipes):
        ws.teacher(reverse=True)
    if budget is not None and budget != desk.train.max_checkpoints:
        sizes = [s for s in sizes if s == "SMALL"]
    results = []
    for size, recipe, dropout in table3_cells(budget, trials, recipes, sizes):
        cfg = ExperimentConfig(task=task, model=size, recipe=recipe, dropout=dropout, budget=budget, trials=tuple(trials), desk=desk)
        logger.info("cell %s", cfg.cell_id)
        results.append(run_experiment(cfg, ws, out_dir))
    if out_dir is not None:
        planned = [ExperimentConfig(task=task, model=s, recipe=r, dropout=d, budget=budget, trials=tuple(trials), desk=desk).cell_id
                   for s, r, d in table3_cells(budget, trials, recipes, sizes)]
        Path(out_dir, "pipeline.json").write_text(json.dumps({"cells": planned}, indent=2) + "\n")
        for key, rows in ws.teacher_metrics.items():
            write_metrics(rows, Path(out_dir) / f"teacher-{key}-metrics.tsv")
        emit_tables_and_curves(out_dir)
    return results


# ---------------------------------------------------------------- grid


@dataclass
class GridPoint:
    variant: str
    bpe_merges: int
    hidden_size: int
    num_params: int
    valid_bleu: float
    test_bleu: float
    error: str = ""


def grid_search(grid: dict[str, Sequence[int]], variants: Sequence[str] = ("base", "base+kd"),
                workspace: Workspace | None = None, task: SyntheticTaskSpec | dict | None = None,
                desk: DeskScale | None = None, seed: int = 1, out_dir: str | Path | None = None) -> list[GridPoint]:
    """Train every (bpe_merges, hidden=embed size) point once per dataset variant.

    ``grid`` holds ``bpe_merges`` and ``hidden_size`` lists; a ``num_layers``
    or ``cell_type`` list may be added.  Failures are recorded and skipped.
    """
    desk = desk or (workspace.desk if workspace is not None else DeskScale())
    ws = workspace or Workspace(task if task is not None else SyntheticTaskSpec(), desk)
    base = desk.small
    points = []
    for variant in variants:
        for merges in grid["bpe_merges"]:
            for hidden in grid["hidden_size"]:
                for layers in grid.get("num_layers", [base.num_layers]):
                    for cell in grid.get("cell_type", [base.cell_type]):
                        try:
                            model = replace(base, bpe_merges=int(merges), hidden_size=int(hidden), embed_size=int(hidden),
                                            num_layers=int(layers), cell_type=cell)
                            cfg = ExperimentConfig(task=ws.task, model=model, recipe=variant, trials=(seed,), desk=desk)
                            res = run_experiment(cfg, ws)
                            if not res.row.complete:
                                raise RuntimeError(f"trial {seed} failed")
                            data = ws.dataset(variant)
                            nparams = count_params(model, len(Codec.fit(data.sources, merges).vocab),
                                                   len(Codec.fit(data.targets, merges).vocab))
                            points.append(GridPoint(variant, merges, hidden, nparams, res.valid_best[seed], res.row.bleu[0]))
                        except Exception as exc:  # recorded, search continues
                            logger.exception("grid point %s/%s/%s failed", variant, merges, hidden)
                            points.append(GridPoint(variant, merges, hidden, 0, float("nan"), float("nan"), repr(exc)))
    if out_dir is not None:
        write_scatter(points, Path(out_dir) / "scatter.tsv")
    return points


def write_scatter(points: Iterable[GridPoint], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(GridPoint.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(cols)
        for p in points:
            w.writerow([getattr(p, c) for c in cols])


# ---------------------------------------------------------------- reports


def _write_tsv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def emit_tables_and_curves(results_dir: str | Path) -> dict[str, Path]:
    """Collect every ``*/result.json`` under ``results_dir`` into report files.

    Cells listed in ``pipeline.json`` without a result appear as ``n/a`` rows.
    """
    root = Path(results_dir)
    results = {}
    for f in sorted(root.glob("*/result.json")):
        d = json.loads(f.read_text())
        results[d["cell"]] = d
    planned = json.loads((root / "pipeline.json").read_text())["cells"] if (root / "pipeline.json").exists() else []
    missing = [c for c in planned if c not in results]

    def ordered():
        return sorted(results.values(), key=lambda d: (d["row"]["size"] != "SMALL", not d["row"]["dropout"], d["cell"]))

    files = {}
    max_trials = max((len(d["row"]["bleu"]) for d in results.values()), default=0)
    t1 = [d for d in ordered() if d["row"]["size"] == "SMALL" and d["row"]["dropout"]]
    files["table1"] = _write_tsv(
        root / "table1.tsv", ["dataset", "budget", *(f"trial{i + 1}" for i in range(max_trials)), "avg"],
        [[d["row"]["dataset"], d["cell"].rsplit("-ck", 1)[1], *(f"{b:.2f}" for b in d["row"]["bleu"]),
          *([""] * (max_trials - len(d["row"]["bleu"]))), f"{d['row']['mean_bleu']:.2f}"] for d in t1])
    seen, t2 = set(), []
    for d in ordered():
        name = d["row"]["dataset"]
        if name not in seen:
            seen.add(name)
            t2.append([name, d["stats"]["avg_tokens"], d["stats"]["vocab_size"]])
    files["table2"] = _write_tsv(root / "table2.tsv", ["name", "avg_tokens", "vocab_size"], t2)
    t3 = [[d["cell"], d["row"]["dataset"], d["row"]["size"], "on" if d["row"]["dropout"] else "off",
           f"{d['row']['mean_bleu']:.2f}", f"{d['row']['mean_train_ppl']:.3f}",
           ",".join(map(str, d["row"]["convergence"])), ",".join(map(str, d["row"]["failed_seeds"]))] for d in ordered()]
    t3 += [[c, "n/a", "n/a", "n/a", "n/a", "n/a", "n/a", "missing"] for c in missing]
    files["table3"] = _write_tsv(root / "table3.tsv", ["cell", "dataset", "size", "dropout", "bleu", "ppl_train",
                                                       "convergence_ckpt", "failed"], t3)
    curves = []
    for d in ordered():
        for seed, rows in d["metrics"].items():
            for m in rows:
                curves.append([d["cell"], seed, m["checkpoint"], m["updates"], f"{m['valid_bleu']:.4f}", f"{m['valid_ppl']:.4f}"])
    files["curves"] = _write_tsv(root / "curves.tsv", ["cell", "seed", "checkpoint", "updates", "valid_bleu", "valid_ppl"], curves)

    lines = ["# Results", "", "| cell | BLEU | train PPL | 95% convergence checkpoint |", "|---|---|---|---|"]
    for d in ordered():
        r = d["row"]
        lines.append(f"| {d['cell']} | {r['mean_bleu']:.2f} | {r['mean_train_ppl']:.3f} | {', '.join(map(str, r['convergence']))} |")
    for c in missing:
        lines.append(f"| {c} | n/a | n/a | n/a |")
    if missing:
        lines += ["", f"{len(missing)} planned cell(s) missing."]
    lines += ["", "Noise on synthetic tasks is token replacement with rare words (a modelling choice)."]
    files["summary"] = root / "summary.md"
    files["summary"].write_text("\n".join(lines) + "\n")
    return files
