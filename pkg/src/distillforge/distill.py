"""Training-set construction: kd, bt, best-2 and their concatenations."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .decode import Translator, translate_corpus
from .textproc import Bitext, write_bitext

logger = logging.getLogger(__name__)

COMPONENTS = ("base", "kd", "bt", "best2")
_ALIASES = {"best-2": "best2", "baseline": "base"}


@dataclass(frozen=True)
class DatasetRecipe:
    """Ordered list of dataset components, e.g. ``base+kd+bt``."""

    components: tuple[str, ...]
    beam_size: int = 5

    def __post_init__(self):
        if not self.components:
            raise ValueError("a recipe needs at least one component")
        comps = tuple(_ALIASES.get(c, c) for c in self.components)
        bad = [c for c in comps if c not in COMPONENTS]
        if bad:
            raise ValueError(f"unknown recipe component(s) {bad}; choose from {COMPONENTS}")
        object.__setattr__(self, "components", comps)

    @classmethod
    def parse(cls, label: str, beam_size: int = 5) -> "DatasetRecipe":
        if label in _ALIASES:
            return cls((_ALIASES[label],), beam_size)
        return cls(tuple(p.strip() for p in label.replace("best-2", "best2").split("+")), beam_size)

    @property
    def name(self) -> str:
        return "+".join("best-2" if c == "best2" else c for c in self.components)

    @property
    def needs_teacher(self) -> bool:
        return any(c in ("kd", "best2") for c in self.components)

    @property
    def needs_reverse_teacher(self) -> bool:
        return "bt" in self.components


def _keep(sources, outputs, failures: Sequence[int], label: str) -> list[int]:
    failed = set(failures) | {i for i, o in enumerate(outputs) if not o}
    if failed:
        logger.warning("%s: %d of %d sentences dropped (failed or empty translation)", label, len(failed), len(sources))
    return [i for i in range(len(sources)) if i not in failed]


def make_kd_dataset(teacher: Translator, bitext: Bitext, beam_size: int = 5, workers: int = 1) -> Bitext:
    """(source, teacher beam translation) pairs."""
    out = translate_corpus(teacher, bitext.sources, beam_size, workers=workers)
    keep = _keep(bitext.sources, out.best, out.failures, "kd")
    return Bitext(tuple((bitext.pairs[i][0], tuple(out.best[i])) for i in keep), "kd")


def make_bt_dataset(reverse_teacher: Translator, bitext: Bitext, beam_size: int = 5, workers: int = 1) -> Bitext:
    """(reverse-teacher translation of the target, gold target) pairs."""
    out = translate_corpus(reverse_teacher, bitext.targets, beam_size, workers=workers)
    keep = _keep(bitext.targets, out.best, out.failures, "bt")
    return Bitext(tuple((tuple(out.best[i]), bitext.pairs[i][1]) for i in keep), "bt")


def make_best2_dataset(teacher: Translator, bitext: Bitext, beam_size: int = 5, workers: int = 1) -> tuple[Bitext, int]:
    """Best and second-best distinct beam outputs per source, best block first.

    Returns the dataset and the number of sources whose beam collapsed to a
    single distinct hypothesis (those contribute one pair).
    """
    if beam_size < 2:
        raise ValueError("best-2 needs beam_size >= 2")
    out = translate_corpus(teacher, bitext.sources, beam_size, nbest=2, workers=workers)
    keep = _keep(bitext.sources, out.best, out.failures, "best-2")
    first = [(bitext.pairs[i][0], tuple(out.nbest[i][0])) for i in keep]
    second = [(bitext.pairs[i][0], tuple(out.nbest[i][1])) for i in keep if len(out.nbest[i]) > 1 and out.nbest[i][1]]
    shortfall = len(keep) - len(second)
    if shortfall:
        logger.info("best-2: %d sources yielded a single distinct hypothesis", shortfall)
    return Bitext(tuple(first + second), "best-2"), shortfall


def concat_datasets(datasets: Sequence[Bitext]) -> Bitext:
    """Plain concatenation (duplicates kept), named by joining labels with '+'."""
    if not datasets:
        raise ValueError("nothing to concatenate")
    if len(datasets) == 1:
        return datasets[0]
    return Bitext(tuple(p for d in datasets for p in d.pairs), "+".join(d.name for d in datasets))


def bitext_hash(bitext: Bitext) -> str:
    h = hashlib.sha256()
    for s, t in bitext.pairs:
        h.update(" ".join(s).encode())
        h.update(b"\t")
        h.update(" ".join(t).encode())
        h.update(b"\n")
    return h.hexdigest()


@dataclass
class BuiltRecipe:
    recipe: DatasetRecipe
    bitext: Bitext
    parts: dict[str, Bitext]
    shortfall: int = 0

    def manifest(self, teacher: str | None = None, reverse_teacher: str | None = None, seeds: Mapping | None = None) -> dict:
        return {
            "name": self.recipe.name,
            "beam_size": self.recipe.beam_size,
            "size": len(self.bitext),
            "sha256": bitext_hash(self.bitext),
            "components": [{"name": k, "size": len(v), "sha256": bitext_hash(v)} for k, v in self.parts.items()],
            "best2_shortfall": self.shortfall,
            "teacher": teacher,
            "reverse_teacher": reverse_teacher,
            "seeds": dict(seeds or {}),
        }


def build_recipe(recipe: DatasetRecipe | str, base: Bitext, teacher: Translator | None = None,
                 reverse_teacher: Translator | None = None, workers: int = 1,
                 cache: dict[str, Bitext] | None = None) -> BuiltRecipe:
    """Assemble a recipe's training corpus.  ``cache`` lets several recipes
    share translated components (keys: ``kd``, ``bt``, ``best2``)."""
    if isinstance(recipe, str):
        recipe = DatasetRecipe.parse(recipe)
    if recipe.needs_teacher and teacher is None:
        raise ValueError(f"recipe {recipe.name} needs a teacher")
    if recipe.needs_reverse_teacher and reverse_teacher is None:
        raise ValueError(f"recipe {recipe.name} needs a reverse teacher")
    cache = {} if cache is None else cache
    shortfall = cache.get("best2_shortfall", 0)
    parts: dict[str, Bitext] = {}
    for comp in recipe.components:
        if comp == "base":
            parts[comp] = base
            continue
        if comp not in cache:
            if comp == "kd":
                cache[comp] = make_kd_dataset(teacher, base, recipe.beam_size, workers)
            elif comp == "bt":
                cache[comp] = make_bt_dataset(reverse_teacher, base, recipe.beam_size, workers)
            else:
                cache[comp], cache["best2_shortfall"] = make_best2_dataset(teacher, base, max(recipe.beam_size, 2), workers)
                shortfall = cache["best2_shortfall"]
        parts[comp] = cache[comp]
    data = concat_datasets([p.renamed(k if k != "best2" else "best-2") for k, p in parts.items()])
    return BuiltRecipe(recipe, data.renamed(recipe.name), parts, shortfall if "best2" in parts else 0)


def write_recipe(built: BuiltRecipe, out_dir: str | Path, teacher: str | None = None,
                 reverse_teacher: str | None = None, seeds: Mapping | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_bitext(built.bitext, out / built.recipe.name)
    path = out / "manifest.json"
    path.write_text(json.dumps(built.manifest(teacher, reverse_teacher, seeds), indent=2) + "\n")
    return path
