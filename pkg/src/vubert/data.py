"""Dialog instances: VisDial v1.0 JSON ingest/export and a synthetic shape world.

VisDial v1.0 interchange structure::

    {"version": "1.0", "split": "val2018",
     "data": {"questions": [str, ...],            # global question pool
              "answers":   [str, ...],            # global answer pool
              "dialogs": [{"image_id": int,
                           "caption": str,
                           "dialog": [{"question": q_idx,
                                       "answer": a_idx,              # history rounds
                                       "answer_options": [a_idx, ...],
                                       "gt_index": int}, ...]}]}}

Each round carrying ``answer_options`` becomes one :class:`DialogInstance`
whose history is every earlier round of that dialog. Dense annotations live
in a separate file: a list of ``{"image_id", "round_id" (1-based),
"gt_relevance": [float, ...]}`` records (``"relevance"`` is accepted too).
Images are looked up as ``<image_dir>/<image_id>.raster`` when an image
directory is supplied (see :func:`vubert.embeddings.write_raster`).
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from vubert.embeddings import ImageRaster, read_raster, write_raster
from vubert.errors import DataError


@dataclass
class DialogInstance:
    image: ImageRaster | None
    caption: str
    history: list[str]  # flattened q1, a1, q2, a2, ... oldest first
    question: str
    candidates: list[str]
    gt_index: int
    relevance: np.ndarray | None = None
    image_id: int | str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.gt_index < len(self.candidates):
            raise DataError(f"gt_index {self.gt_index} outside {len(self.candidates)} candidates")
        if self.relevance is not None:
            self.relevance = np.asarray(self.relevance, dtype=np.float64)

    @property
    def answer(self) -> str:
        return self.candidates[self.gt_index]

    @property
    def n_turns(self) -> int:
        return len(self.history) // 2

    def __eq__(self, other) -> bool:
        if not isinstance(other, DialogInstance):
            return NotImplemented
        rel_eq = (self.relevance is None and other.relevance is None) or (
            self.relevance is not None and other.relevance is not None
            and np.array_equal(self.relevance, other.relevance))
        return (self.image == other.image and self.caption == other.caption and self.history == other.history
                and self.question == other.question and self.candidates == other.candidates
                and self.gt_index == other.gt_index and rel_eq and self.image_id == other.image_id
                and self.meta == other.meta)


def truncate_history(instance: DialogInstance, max_turns: int) -> DialogInstance:
    """Keep only the most recent ``max_turns`` question/answer pairs."""
    if max_turns < 0:
        raise ValueError("max_turns must be >= 0")
    keep = instance.history[-2 * max_turns:] if max_turns else []
    return dataclasses.replace(instance, history=list(keep))


def strip_image(instance: DialogInstance) -> DialogInstance:
    return dataclasses.replace(instance, image=None)


def batch_iter(instances: Sequence, batch_size: int, shuffle_seed: int | None = None) -> Iterator[list]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(instances))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(instances))
    for start in range(0, len(order), batch_size):
        yield [instances[i] for i in order[start:start + batch_size]]


# ---------------------------------------------------------------- VisDial JSON

def _resolve_paths(path, split):
    path = Path(path)
    if path.is_dir():
        main = path / f"visdial_1.0_{split}.json"
        dense = path / f"visdial_1.0_{split}_dense_annotations.json"
        images = path / "images"
        return main, dense if dense.exists() else None, images if images.is_dir() else None
    return path, None, None


def load_visdial(path: str | os.PathLike, split: str = "val", dense_path: str | os.PathLike | None = None,
                 image_dir: str | os.PathLike | None = None) -> list[DialogInstance]:
    """Materialize every answer-option round of a VisDial v1.0 file as an instance.

    ``path`` is either the JSON file itself or a directory holding
    ``visdial_1.0_<split>.json`` (plus, optionally, the dense-annotation file
    and an ``images/`` directory of rasters).
    """
    main, auto_dense, auto_images = _resolve_paths(path, split)
    dense_path = dense_path or auto_dense
    image_dir = image_dir or auto_images
    try:
        blob = json.loads(Path(main).read_text(encoding="utf-8"))
        data = blob["data"]
        questions, answers, dialogs = data["questions"], data["answers"], data["dialogs"]
    except FileNotFoundError:
        raise DataError(f"{main}: file not found") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{main}: malformed VisDial JSON ({exc})") from None

    dense = {}
    if dense_path is not None:
        try:
            for rec in json.loads(Path(dense_path).read_text(encoding="utf-8")):
                rel = rec.get("gt_relevance", rec.get("relevance"))
                dense[(rec["image_id"], int(rec["round_id"]))] = rel
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{dense_path}: malformed dense annotations ({exc})") from None

    def pool(kind, table, idx, where):
        if not isinstance(idx, int) or not 0 <= idx < len(table):
            raise DataError(f"{main}: {where}: dangling {kind} index {idx} (pool has {len(table)})")
        return table[idx]

    out = []
    for d_i, dialog in enumerate(dialogs):
        where = f"dialog {d_i}"
        try:
            image_id, caption, rounds = dialog["image_id"], dialog["caption"], dialog["dialog"]
        except (KeyError, TypeError):
            raise DataError(f"{main}: {where}: missing image_id/caption/dialog") from None
        image = None
        if image_dir is not None and (Path(image_dir) / f"{image_id}.raster").exists():
            image = read_raster(Path(image_dir) / f"{image_id}.raster")
        history: list[str] = []
        for r_i, rnd in enumerate(rounds):
            rwhere = f"{where} round {r_i}"
            question = pool("question", questions, rnd.get("question"), rwhere)
            if "answer_options" in rnd:
                if "gt_index" not in rnd:
                    raise DataError(f"{main}: {rwhere}: answer_options without gt_index")
                options = [pool("answer", answers, a, rwhere) for a in rnd["answer_options"]]
                gt = rnd["gt_index"]
                if not isinstance(gt, int) or not 0 <= gt < len(options):
                    raise DataError(f"{main}: {rwhere}: gt_index {gt} outside {len(options)} options")
                rel = dense.get((image_id, r_i + 1))
                if rel is not None and len(rel) != len(options):
                    raise DataError(f"{main}: {rwhere}: {len(rel)} relevance scores for {len(options)} options")
                out.append(DialogInstance(image=image, caption=caption, history=list(history), question=question,
                                          candidates=options, gt_index=gt,
                                          relevance=None if rel is None else np.asarray(rel, dtype=np.float64),
                                          image_id=image_id, meta=dict(dialog.get("meta", {}))))
            if "answer" in rnd:
                history += [question, pool("answer", answers, rnd["answer"], rwhere)]
            elif "answer_options" not in rnd:
                raise DataError(f"{main}: {rwhere}: round has neither answer nor answer_options")
    return out


def dump_visdial(instances: Sequence[DialogInstance], path: str | os.PathLike, split: str = "val",
                 dense_path: str | os.PathLike | None = None, image_dir: str | os.PathLike | None = None) -> None:
    """Write instances in the interchange structure, one dialog per instance."""
    questions: dict[str, int] = {}
    answers: dict[str, int] = {}

    def qid(s):
        return questions.setdefault(s, len(questions))

    def aid(s):
        return answers.setdefault(s, len(answers))

    dialogs, dense = [], []
    if image_dir is not None:
        Path(image_dir).mkdir(parents=True, exist_ok=True)
    for n, inst in enumerate(instances):
        if len(inst.history) % 2:
            raise DataError(f"instance {n}: history must hold question/answer pairs")
        rounds = [{"question": qid(inst.history[i]), "answer": aid(inst.history[i + 1])}
                  for i in range(0, len(inst.history), 2)]
        rounds.append({"question": qid(inst.question), "answer": aid(inst.answer),
                       "answer_options": [aid(c) for c in inst.candidates], "gt_index": inst.gt_index})
        image_id = inst.image_id if inst.image_id is not None else n
        entry = {"image_id": image_id, "caption": inst.caption, "dialog": rounds}
        if inst.meta:
            entry["meta"] = inst.meta
        dialogs.append(entry)
        if inst.relevance is not None:
            dense.append({"image_id": image_id, "round_id": len(rounds),
                          "gt_relevance": [float(x) for x in inst.relevance]})
        if image_dir is not None and inst.image is not None:
            write_raster(Path(image_dir) / f"{image_id}.raster", inst.image)
    blob = {"version": "1.0", "split": split,
            "data": {"questions": list(questions), "answers": list(answers), "dialogs": dialogs}}
    Path(path).write_text(json.dumps(blob), encoding="utf-8")
    if dense_path is not None:
        Path(dense_path).write_text(json.dumps(dense), encoding="utf-8")


def save_corpus(instances: Sequence[DialogInstance], directory: str | os.PathLike, split: str) -> None:
    """Directory layout readable by ``load_visdial(directory, split)``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dump_visdial(instances, directory / f"visdial_1.0_{split}.json", split,
                 dense_path=directory / f"visdial_1.0_{split}_dense_annotations.json",
                 image_dir=directory / "images")


# ---------------------------------------------------------------- synthetic shape world

COLORS = {
    "red": (0.9, 0.1, 0.1), "green": (0.1, 0.8, 0.2), "blue": (0.1, 0.2, 0.9),
    "yellow": (0.95, 0.9, 0.1), "purple": (0.6, 0.1, 0.8), "orange": (1.0, 0.55, 0.0),
}
SHAPES = ("circle", "square", "triangle")
CELLS = ("top left", "top right", "bottom left", "bottom right")

IMAGE_TEMPLATES = {
    "color": ("what color is the {shape} ?", "color"),
    "shape": ("which shape is {color} ?", "shape"),
}

# (history question, current question asking about the same fact, answer values)
FACTS = {
    "pet": ("what is the name of the pet ?", "what did you say the pet is called ?",
            ("rex", "max", "bella", "luna", "coco", "milo")),
    "city": ("where was this photo taken ?", "which city did you mention ?",
             ("paris", "tokyo", "cairo", "lima", "oslo", "rome")),
    "count": ("how many people are nearby ?", "how many people did you say ?",
              ("one", "two", "three", "four", "five", "six")),
}

FILLERS = (
    ("is it sunny ?", ("yes", "no")),
    ("is this indoors ?", ("yes", "no")),
    ("is the picture clear ?", ("yes", "no")),
    ("are there any people ?", ("yes", "no")),
    ("is it a drawing ?", ("yes", "no")),
    ("do you like it ?", ("yes", "no", "maybe")),
)

CAPTIONS = ("{count} on a dark background", "a simple picture of {count}", "some shapes drawn on a grid")
COUNT_WORDS = ("one shape", "two shapes", "three shapes")


def render_world(attributes: list[dict], image_size: int) -> ImageRaster:
    """Flat-colored shapes on black, one per quadrant cell listed in ``attributes``."""
    img = np.zeros((image_size, image_size, 3))
    cell = image_size // 2
    margin = max(1, cell // 8)
    yy, xx = np.mgrid[0:cell, 0:cell] + 0.5
    inner = cell - 2 * margin
    for attr in attributes:
        r0 = (CELLS.index(attr["cell"]) // 2) * cell
        c0 = (CELLS.index(attr["cell"]) % 2) * cell
        if attr["shape"] == "square":
            mask = (yy > margin) & (yy < cell - margin) & (xx > margin) & (xx < cell - margin)
        elif attr["shape"] == "circle":
            mask = (yy - cell / 2) ** 2 + (xx - cell / 2) ** 2 <= (inner / 2) ** 2
        else:
            # apex at the top, base at the bottom
            frac = (yy - margin) / inner
            mask = (frac >= 0) & (frac <= 1) & (np.abs(xx - cell / 2) <= frac * inner / 2)
        img[r0:r0 + cell, c0:c0 + cell][mask] = COLORS[attr["color"]]
    return ImageRaster(img)


def answer_type(answer: str) -> str:
    if answer in COLORS:
        return "color"
    if answer in SHAPES:
        return "shape"
    for kind, (_, _, values) in FACTS.items():
        if answer in values:
            return kind
    return "filler"


def _values_of(kind: str) -> tuple[str, ...]:
    if kind == "color":
        return tuple(COLORS)
    if kind == "shape":
        return SHAPES
    if kind in FACTS:
        return FACTS[kind][2]
    return tuple(sorted({a for _, answers in FILLERS for a in answers}))


def generate_synthetic(seed: int, n_dialogs: int, turns: int = 10, n_candidates: int = 20,
                       image_size: int = 32, patch: int = 8, image_fraction: float = 0.5,
                       n_shapes: int = 2) -> list[DialogInstance]:
    """Deterministic corpus; each dialog yields one instance at its final turn.

    The final question is image-dependent with probability ``image_fraction``
    (its answer is readable only from pixels) and history-dependent otherwise
    (it asks back about a fact stated within the last three history turns).
    """
    if n_dialogs < 0 or turns < 1 or n_candidates < 2:
        raise ValueError("need n_dialogs >= 0, turns >= 1 and n_candidates >= 2")
    if image_size % patch or image_size % 2:
        raise ValueError(f"image size {image_size} must be even and divisible by patch size {patch}")
    if not 0.0 <= image_fraction <= 1.0:
        raise ValueError("image_fraction must lie in [0, 1]")
    if not 1 <= n_shapes <= len(SHAPES):
        raise ValueError(f"n_shapes must lie in [1, {len(SHAPES)}]")
    if turns < 2 and image_fraction < 1.0:
        raise ValueError("history-dependent questions need turns >= 2")
    rng = np.random.default_rng(seed)
    all_answers = sorted({v for kind in ("color", "shape", *FACTS, "filler") for v in _values_of(kind)})
    out = []
    for d in range(n_dialogs):
        shapes = rng.choice(len(SHAPES), size=n_shapes, replace=False)
        colors = rng.choice(len(COLORS), size=n_shapes, replace=False)
        cells = rng.choice(len(CELLS), size=n_shapes, replace=False)
        attributes = [{"shape": SHAPES[s], "color": list(COLORS)[c], "cell": CELLS[p]}
                      for s, c, p in zip(shapes, colors, cells)]
        image = render_world(attributes, image_size)
        n_hist = turns - 1

        fact_kinds = list(FACTS)
        rng.shuffle(fact_kinds)
        facts = {k: FACTS[k][2][rng.integers(len(FACTS[k][2]))] for k in fact_kinds}
        history_pairs: list[tuple[str, str]] = []
        fillers = rng.permutation(len(FILLERS))
        for i in range(n_hist):
            q, answers = FILLERS[fillers[i % len(FILLERS)]]
            history_pairs.append((q, answers[rng.integers(len(answers))]))

        image_q = rng.random() < image_fraction
        if image_q:
            template = ("color", "shape")[rng.integers(2)]
            target = attributes[rng.integers(n_shapes)]
            if template == "color":
                question = IMAGE_TEMPLATES["color"][0].format(shape=target["shape"])
                answer = target["color"]
            else:
                question = IMAGE_TEMPLATES["shape"][0].format(color=target["color"])
                answer = target["shape"]
            kind, akind = "image", template
            # remaining facts may appear anywhere in the history as distractors
            placed = fact_kinds[:min(len(fact_kinds), n_hist)]
            slots = rng.choice(n_hist, size=len(placed), replace=False) if placed else []
        else:
            ask = fact_kinds[0]
            question, answer = FACTS[ask][1], facts[ask]
            kind, akind, template = "history", ask, ask
            recent = rng.integers(max(0, n_hist - 3), n_hist)
            others = [i for i in range(n_hist) if i != recent]
            extra = fact_kinds[1:1 + min(len(fact_kinds) - 1, len(others))]
            slots = [recent] + list(rng.choice(others, size=len(extra), replace=False))
            placed = [ask] + extra
        for k, slot in zip(placed, slots):
            history_pairs[int(slot)] = (FACTS[k][0], facts[k])

        same = [v for v in _values_of(akind) if v != answer]
        n_same = min(len(same), (n_candidates - 1) // 2)
        chosen = list(rng.choice(same, size=n_same, replace=False)) if n_same else []
        pool = [a for a in all_answers if a != answer and a not in chosen]
        n_rest = min(len(pool), n_candidates - 1 - len(chosen))
        chosen += list(rng.choice(pool, size=n_rest, replace=False))
        candidates = [answer] + [str(c) for c in chosen]
        order = rng.permutation(len(candidates))
        candidates = [candidates[i] for i in order]
        gt = int(np.flatnonzero(order == 0)[0])
        relevance = np.zeros(len(candidates))
        relevance[gt] = 1.0
        history = [u for pair in history_pairs for u in pair]
        meta = {"kind": kind, "template": template, "attributes": attributes, "facts": facts}
        caption = CAPTIONS[rng.integers(len(CAPTIONS))].format(count=COUNT_WORDS[n_shapes - 1])
        out.append(DialogInstance(image=image, caption=caption, history=history,
                                  question=question, candidates=candidates, gt_index=gt, relevance=relevance,
                                  image_id=seed * 1_000_003 + d, meta=meta))
    return out


def table_lookup_answer(instance: DialogInstance) -> str | None:
    """Answer an image-dependent synthetic question straight from the attribute table."""
    for attr in instance.meta.get("attributes", []):
        if instance.question == IMAGE_TEMPLATES["color"][0].format(shape=attr["shape"]):
            return attr["color"]
        if instance.question == IMAGE_TEMPLATES["shape"][0].format(color=attr["color"]):
            return attr["shape"]
    return None
