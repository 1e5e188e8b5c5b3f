"""Procedural GRES datasets: grid scenes of coloured shapes with templated
multi / single / no-target expressions, masks and per-category counts.

On disk a dataset is a directory holding ``dataset.json`` and ``vocab.json``::

    dataset.json = {"meta": {"grid_hw", "C", "seed", "vocab_ref", ...},
                    "samples": [{"image_id", "grid", "tokens", "mask_rle",
                                 "counts", "exist", "polarity", "scenario",
                                 "text"}, ...]}

Masks use uncompressed column-major RLE whose first run counts zeros.
Cell ids in ``grid``: 0 is background, ``1 + category * n_colors + color``
otherwise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

CATEGORIES = ("circle", "square", "triangle", "hexagon", "star", "cross",
              "diamond", "ring", "heart", "arrow", "moon", "pentagon")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
SIDES = ("left", "right")
NUMBERS = ("two", "three", "four", "five")
FUNCTION_WORDS = ("the", "all", "and", "on", "objects")
PAD = "<pad>"
SCENARIOS = ("multi", "single", "none")

BLOCK = 2                      # pixels per lattice block
SIZE_BLOCKS = {"small": 2, "large": 4}


class FormatError(ValueError):
    pass


def build_vocab() -> list[str]:
    words = [PAD, *FUNCTION_WORDS, *SIDES, *SIZES, *COLORS, *NUMBERS]
    for c in CATEGORIES:
        words += [c, c + "s"]
    return words


VOCAB = build_vocab()
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}


def tokenize(text: str) -> list[int]:
    return [TOKEN_ID[w] for w in text.split()]


def detokenize(tokens) -> str:
    return " ".join(VOCAB[t] for t in tokens if t != TOKEN_ID[PAD])


def n_cell_ids(n_categories: int) -> int:
    return 1 + n_categories * len(COLORS)


# ---------------------------------------------------------------- RLE

def rle_encode(mask) -> list[int]:
    flat = np.asarray(mask).astype(bool).flatten(order="F")
    if np.any((np.asarray(mask) != 0) & (np.asarray(mask) != 1)):
        raise FormatError("mask must be binary")
    counts, cur, run = [], False, 0
    for v in flat:
        if v == cur:
            run += 1
        else:
            counts.append(run)
            cur, run = v, 1
    counts.append(run)
    return counts


def rle_decode(counts, h: int, w: int) -> np.ndarray:
    if sum(counts) != h * w or any(c < 0 for c in counts):
        raise FormatError(f"RLE counts sum to {sum(counts)}, expected {h * w}")
    flat = np.zeros(h * w, dtype=np.uint8)
    pos, val = 0, 0
    for c in counts:
        flat[pos:pos + c] = val
        pos += c
        val ^= 1
    return flat.reshape((h, w), order="F")


# ---------------------------------------------------------------- scenes

@dataclass
class Instance:
    category: int
    color: int
    size: str
    cells: frozenset          # {(y, x)} pixel coordinates
    side: str                 # half of the image the instance lies in

    @property
    def cell_id(self) -> int:
        return 1 + self.category * len(COLORS) + self.color


@dataclass
class Scene:
    grid: np.ndarray
    instances: list[Instance]


def _pattern(category: int, s: int) -> np.ndarray:
    """Block footprint of a shape; small shapes are solid so no part is a
    lone diagonal block."""
    if s < 3:
        return np.ones((s, s), bool)
    y, x = np.mgrid[0:s, 0:s]
    c = (s - 1) / 2
    rule = category % 6
    if rule == 0:
        m = (y - c) ** 2 + (x - c) ** 2 <= c * c + 0.5 * c + 0.25
    elif rule == 1:
        m = np.ones((s, s), bool)
    elif rule == 2:
        m = y >= x
    elif rule == 3:
        m = ~(((y == 0) & (x == 0)) | ((y == s - 1) & (x == s - 1)))
    elif rule == 4:
        m = np.abs(y - c) + np.abs(x - c) <= c + 0.5
    else:
        m = (np.abs(y - c) < 1) | (np.abs(x - c) < 1)
    return m


def make_scene(rng: np.random.Generator, grid_hw=(32, 32), n_categories: int = 4,
               n_instances=(3, 6), max_tries: int = 200) -> Scene:
    h, w = grid_hw
    bh, bw = h // BLOCK, w // BLOCK
    mid = bw // 2
    occupied = np.zeros((bh, bw), bool)
    grid = np.zeros((h, w), dtype=np.int64)
    target = int(rng.integers(n_instances[0], n_instances[1] + 1))
    instances: list[Instance] = []
    tries = 0
    while len(instances) < target and tries < max_tries:
        tries += 1
        cat = int(rng.integers(n_categories))
        color = int(rng.integers(len(COLORS)))
        size = SIZES[int(rng.integers(len(SIZES)))]
        s = SIZE_BLOCKS[size]
        by, bx = int(rng.integers(0, bh - s + 1)), int(rng.integers(0, bw - s + 1))
        if bx < mid < bx + s:
            continue
        y0, y1, x0, x1 = max(by - 1, 0), min(by + s + 1, bh), max(bx - 1, 0), min(bx + s + 1, bw)
        if occupied[y0:y1, x0:x1].any():
            continue
        occupied[by:by + s, bx:bx + s] = True
        pat = np.kron(_pattern(cat, s), np.ones((BLOCK, BLOCK), bool))
        ys, xs = np.nonzero(pat)
        cells = frozenset((int(by * BLOCK + yy), int(bx * BLOCK + xx)) for yy, xx in zip(ys, xs))
        inst = Instance(cat, color, size, cells, "left" if bx + s <= mid else "right")
        for yy, xx in cells:
            grid[yy, xx] = inst.cell_id
        instances.append(inst)
    return Scene(grid, instances)


# ---------------------------------------------------------------- expressions

def _plural(cat: int) -> str:
    return CATEGORIES[cat] + "s"


def enumerate_expressions(scene: Scene, n_categories: int) -> dict[str, list[tuple[str, tuple[int, ...]]]]:
    """Every well-formed expression for ``scene``, bucketed by scenario.

    Singular phrasings must pick exactly one instance, plural ones at least
    two; no-target phrasings must mention something present in the scene.
    """
    inst = scene.instances
    present_cats = {i.category for i in inst}
    present_colors = {i.color for i in inst}
    out: dict[str, list] = {s: [] for s in SCENARIOS}

    def sel(pred):
        return tuple(k for k, i in enumerate(inst) if pred(i))

    def add_singular(text, picked, deceptive_ok):
        if len(picked) == 1:
            out["single"].append((text, picked))
        elif not picked and deceptive_ok:
            out["none"].append((text, picked))

    def add_plural(text, picked, deceptive_ok):
        if len(picked) >= 2:
            out["multi"].append((text, picked))
        elif not picked and deceptive_ok:
            out["none"].append((text, picked))

    for c in range(n_categories):
        name = CATEGORIES[c]
        cat_here = c in present_cats
        add_singular(f"the {name}", sel(lambda i: i.category == c), False)
        add_plural(f"all {_plural(c)}", sel(lambda i: i.category == c), bool(present_cats))
        for col in range(len(COLORS)):
            p = sel(lambda i: i.category == c and i.color == col)
            add_singular(f"the {COLORS[col]} {name}", p, col in present_colors)
            add_plural(f"{COLORS[col]} {_plural(c)}", p, col in present_colors and cat_here)
        for size in SIZES:
            p = sel(lambda i: i.category == c and i.size == size)
            add_singular(f"the {size} {name}", p, cat_here)
        for side in SIDES:
            p = sel(lambda i: i.category == c and i.side == side)
            add_singular(f"the {name} on the {side}", p, cat_here)
            add_plural(f"{_plural(c)} on the {side}", p, cat_here)
        count = len(sel(lambda i: i.category == c))
        if count >= 2 and count - 2 < len(NUMBERS):
            out["multi"].append((f"{NUMBERS[count - 2]} {_plural(c)}", sel(lambda i: i.category == c)))
        for c2 in range(c + 1, n_categories):
            p = sel(lambda i: i.category in (c, c2))
            if cat_here and c2 in present_cats:
                out["multi"].append((f"{_plural(c)} and {_plural(c2)}", p))
    for col in range(len(COLORS)):
        p = sel(lambda i: i.color == col)
        if len(p) >= 2:
            out["multi"].append((f"all {COLORS[col]} objects", p))
    return out


# ---------------------------------------------------------------- dataset

@dataclass
class GresSample:
    image_id: int
    grid: np.ndarray
    tokens: list[int]
    gt_mask: np.ndarray
    gt_counts: list[int]
    gt_exist: int
    polarity: str
    scenario: str
    text: str = ""


@dataclass
class GenConfig:
    n_images: int = 32
    grid_hw: tuple[int, int] = (32, 32)
    C: int = 4
    instances_per_image: tuple[int, int] = (3, 6)
    expr_per_image: int = 1
    scenario_mix: dict = field(default_factory=lambda: {"multi": 0.35, "single": 0.35, "none": 0.3})
    seed: int = 0
    max_scene_retries: int = 10

    def __post_init__(self):
        self.grid_hw = tuple(self.grid_hw)
        self.instances_per_image = tuple(self.instances_per_image)
        if not 1 <= self.C <= len(CATEGORIES):
            raise ValueError(f"C must be in 1..{len(CATEGORIES)}")
        if set(self.scenario_mix) - set(SCENARIOS):
            raise ValueError(f"unknown scenario in mix: {sorted(self.scenario_mix)}")
        if abs(sum(self.scenario_mix.values()) - 1.0) > 1e-9:
            raise ValueError("scenario_mix must sum to 1")
        if self.grid_hw[0] % 8 or self.grid_hw[1] % 8:
            raise ValueError("grid dims must be divisible by 8")


@dataclass
class GresDataset:
    meta: dict
    samples: list[GresSample]

    def __len__(self):
        return len(self.samples)

    @property
    def n_categories(self) -> int:
        return int(self.meta["C"])

    @property
    def grid_hw(self) -> tuple[int, int]:
        return tuple(self.meta["grid_hw"])

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        (path / "vocab.json").write_text(json.dumps({"tokens": VOCAB}, indent=1) + "\n")
        h, w = self.grid_hw
        doc = {"meta": self.meta, "samples": [
            {"image_id": s.image_id, "grid": s.grid.tolist(), "tokens": list(s.tokens),
             "mask_rle": rle_encode(s.gt_mask), "counts": list(s.gt_counts), "exist": s.gt_exist,
             "polarity": s.polarity, "scenario": s.scenario, "text": s.text}
            for s in self.samples]}
        validate(doc)
        (path / "dataset.json").write_text(json.dumps(doc, separators=(",", ":")) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "GresDataset":
        path = Path(path)
        if path.is_dir():
            path = path / "dataset.json"
        doc = json.loads(path.read_text())
        validate(doc)
        h, w = doc["meta"]["grid_hw"]
        samples = [GresSample(s["image_id"], np.asarray(s["grid"], dtype=np.int64), list(s["tokens"]),
                              rle_decode(s["mask_rle"], h, w), list(s["counts"]), s["exist"],
                              s["polarity"], s["scenario"], s.get("text", ""))
                   for s in doc["samples"]]
        return cls(doc["meta"], samples)


DATASET_SCHEMA = {
    "type": "object",
    "required": ["meta", "samples"],
    "properties": {
        "meta": {
            "type": "object",
            "required": ["grid_hw", "C", "seed", "vocab_ref"],
            "properties": {
                "grid_hw": {"type": "array", "items": {"type": "integer", "minimum": 8}, "minItems": 2, "maxItems": 2},
                "C": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "vocab_ref": {"type": "string"},
            },
        },
        "samples": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["image_id", "grid", "tokens", "mask_rle", "counts", "exist", "polarity", "scenario"],
                "properties": {
                    "image_id": {"type": "integer"},
                    "grid": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
                    "tokens": {"type": "array", "items": {"type": "integer", "minimum": 0},
                               "minItems": 1, "maxItems": 20},
                    "mask_rle": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                    "counts": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                    "exist": {"enum": [0, 1]},
                    "polarity": {"enum": ["positive", "negative"]},
                    "scenario": {"enum": list(SCENARIOS)},
                },
            },
        },
    },
}


def validate(doc: dict) -> None:
    try:
        jsonschema.validate(doc, DATASET_SCHEMA)
    except jsonschema.ValidationError as e:
        raise FormatError(f"dataset.json: {e.message}") from e
    c = doc["meta"]["C"]
    for s in doc["samples"]:
        if len(s["counts"]) != c:
            raise FormatError(f"sample {s['image_id']}: counts length {len(s['counts'])} != C={c}")
        if (s["exist"] == 1) != (sum(s["counts"]) > 0):
            raise FormatError(f"sample {s['image_id']}: exist flag disagrees with counts")


def splitmix64(x: int) -> int:
    mask = (1 << 64) - 1
    x = (x + 0x9E3779B97F4A7C15) & mask
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return z ^ (z >> 31)


def image_seed(seed: int, image_id: int) -> int:
    return splitmix64(splitmix64(seed) ^ image_id)


def scenario_quota(mix: dict, total: int) -> list[str]:
    """Largest-remainder allocation of ``total`` slots to scenarios."""
    raw = {s: mix.get(s, 0.0) * total for s in SCENARIOS}
    counts = {s: int(np.floor(v)) for s, v in raw.items()}
    left = total - sum(counts.values())
    for s in sorted(SCENARIOS, key=lambda s: (-(raw[s] - counts[s]), SCENARIOS.index(s)))[:left]:
        counts[s] += 1
    return [s for s in SCENARIOS for _ in range(counts[s])]


def _sample_from(scene: Scene, text: str, picked, image_id: int, scenario: str, c: int) -> GresSample:
    h, w = scene.grid.shape
    mask = np.zeros((h, w), np.uint8)
    counts = [0] * c
    for k in picked:
        inst = scene.instances[k]
        counts[inst.category] += 1
        for y, x in inst.cells:
            mask[y, x] = 1
    exist = int(bool(picked))
    return GresSample(image_id, scene.grid.copy(), tokenize(text), mask, counts, exist,
                      "positive" if exist else "negative", scenario, text)


def generate(config: GenConfig) -> GresDataset:
    master = np.random.default_rng(splitmix64(config.seed))
    slots = scenario_quota(config.scenario_mix, config.n_images * config.expr_per_image)
    master.shuffle(slots)
    samples = []
    for image_id in range(config.n_images):
        rng = np.random.default_rng(image_seed(config.seed, image_id))
        wanted = slots[image_id * config.expr_per_image:(image_id + 1) * config.expr_per_image]
        scene, pools = None, None
        for _ in range(config.max_scene_retries):
            scene = make_scene(rng, config.grid_hw, config.C, config.instances_per_image)
            pools = enumerate_expressions(scene, config.C)
            if all(pools[s] for s in wanted):
                break
        used = set()
        for scenario in wanted:
            choices = [e for e in pools[scenario] if e[0] not in used]
            if not choices:
                continue
            text, picked = choices[int(rng.integers(len(choices)))]
            used.add(text)
            samples.append(_sample_from(scene, text, picked, image_id, scenario, config.C))
    meta = {"grid_hw": list(config.grid_hw), "C": config.C, "seed": config.seed, "vocab_ref": "vocab.json",
            "n_cell_ids": n_cell_ids(config.C), "vocab_size": len(VOCAB), "max_len": 20,
            "categories": list(CATEGORIES[:config.C]), "colors": list(COLORS)}
    return GresDataset(meta, samples)
