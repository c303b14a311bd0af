"""Deterministic synthetic referring-segmentation scenes.

A scene is 2-5 non-overlapping flat-colored shapes on a mid-gray background,
paired with an expression drawn from a small grammar that resolves to exactly
one shape.  Everything is a pure function of (seed, grammar), so any split
regenerates bit-identically from its MANIFEST.

Expression templates:
  attribute        "<color> <shape>"
  attribute_side   "<color> <shape> on the <side>"
  relation         "<shape> <side> of <color> <shape>"
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import parse_kv_text, write_kv_file
from .encoders import Vocabulary
from .errors import ConfigError, GenerationError
from .tensor_io import read_pgm, read_ppm, write_pgm, write_ppm

COLOR_TABLE = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.90, 0.10),
    "purple": (0.60, 0.20, 0.80),
    "orange": (0.95, 0.55, 0.10),
}

SHAPE_KINDS = ("circle", "square", "triangle")
SIDES = ("left", "right", "top", "bottom")
FUNCTION_WORDS = ("on", "the", "of")
BACKGROUND = 0.5

TEMPLATES = ("attribute", "attribute_side", "relation")


@dataclass(frozen=True)
class GrammarConfig:
    image_size: int = 64
    colors: tuple = tuple(COLOR_TABLE)
    shapes: tuple = SHAPE_KINDS
    min_shapes: int = 2
    max_shapes: int = 5
    size_frac_min: float = 0.09
    size_frac_max: float = 0.16
    templates: tuple = TEMPLATES

    def __post_init__(self):
        for c in self.colors:
            if c not in COLOR_TABLE:
                raise ConfigError(f"unknown color {c!r}")
        for s in self.shapes:
            if s not in SHAPE_KINDS:
                raise ConfigError(f"unknown shape kind {s!r}")
        for t in self.templates:
            if t not in TEMPLATES:
                raise ConfigError(f"unknown template {t!r}")
        if not (0 < self.size_frac_min <= self.size_frac_max < 0.5):
            raise ConfigError("size fractions must satisfy 0 < min <= max < 0.5")
        if self.min_shapes < 1 or self.max_shapes < self.min_shapes:
            raise ConfigError("invalid shape count range")


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    color: str
    cx: float
    cy: float
    size: float

    @property
    def bounding_radius(self) -> float:
        # circle: size is the radius; square/triangle vertices reach size*sqrt(2)
        return self.size if self.kind == "circle" else self.size * np.sqrt(2.0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "color": self.color, "cx": self.cx, "cy": self.cy, "size": self.size}

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        return cls(d["kind"], d["color"], float(d["cx"]), float(d["cy"]), float(d["size"]))


@dataclass
class Sample:
    image: np.ndarray          # (H, W, 3) float32 in [0, 1]
    expression: str
    gt_mask: np.ndarray        # (H, W) uint8 in {0, 1}
    shapes: list               # scene descriptor
    target_index: int
    expression_struct: tuple
    seed: int


# ---------------------------------------------------------------------------
# rasterization (pixel centers at +0.5)


def rasterize(shape: ShapeSpec, h: int, w: int) -> np.ndarray:
    xs = np.arange(w, dtype=np.float64) + 0.5
    ys = np.arange(h, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    if shape.kind == "circle":
        return ((gx - shape.cx) ** 2 + (gy - shape.cy) ** 2) <= shape.size**2
    if shape.kind == "square":
        return (np.abs(gx - shape.cx) <= shape.size) & (np.abs(gy - shape.cy) <= shape.size)
    if shape.kind == "triangle":
        ax, ay = shape.cx, shape.cy - shape.size
        bx, by = shape.cx - shape.size, shape.cy + shape.size
        cx_, cy_ = shape.cx + shape.size, shape.cy + shape.size
        s1 = (gx - ax) * (by - ay) - (gy - ay) * (bx - ax)
        s2 = (gx - bx) * (cy_ - by) - (gy - by) * (cx_ - bx)
        s3 = (gx - cx_) * (ay - cy_) - (gy - cy_) * (ax - cx_)
        return ((s1 >= 0) & (s2 >= 0) & (s3 >= 0)) | ((s1 <= 0) & (s2 <= 0) & (s3 <= 0))
    raise ConfigError(f"unknown shape kind {shape.kind!r}")


def shape_area(shape: ShapeSpec) -> float:
    """Analytic area in pixels, for rasterization sanity checks."""
    if shape.kind == "circle":
        return float(np.pi * shape.size**2)
    if shape.kind == "square":
        return float(4.0 * shape.size**2)
    return float(2.0 * shape.size**2)  # base 2s, height 2s


def render_image(shapes: Sequence[ShapeSpec], h: int, w: int) -> np.ndarray:
    image = np.full((h, w, 3), BACKGROUND, dtype=np.float32)
    for s in shapes:
        image[rasterize(s, h, w)] = COLOR_TABLE[s.color]
    return image


# ---------------------------------------------------------------------------
# expressions


def render_expression(struct: tuple) -> str:
    if struct[0] == "attribute":
        return f"{struct[1]} {struct[2]}"
    if struct[0] == "attribute_side":
        return f"{struct[1]} {struct[2]} on the {struct[3]}"
    if struct[0] == "relation":
        return f"{struct[1]} {struct[2]} of {struct[3]} {struct[4]}"
    raise ConfigError(f"unknown template {struct[0]!r}")


def parse_expression(expression: str) -> tuple:
    words = expression.lower().split()
    if len(words) == 2:
        return ("attribute", words[0], words[1])
    if len(words) == 5 and words[2] == "on" and words[3] == "the":
        return ("attribute_side", words[0], words[1], words[4])
    if len(words) == 5 and words[2] == "of":
        return ("relation", words[0], words[1], words[3], words[4])
    raise ConfigError(f"unparseable expression {expression!r}")


def _on_side(s: ShapeSpec, side: str, h: int, w: int) -> bool:
    if side == "left":
        return s.cx < w / 2
    if side == "right":
        return s.cx > w / 2
    if side == "top":
        return s.cy < h / 2
    return s.cy > h / 2


def _side_of(target: ShapeSpec, ref: ShapeSpec, side: str) -> bool:
    if side == "left":
        return target.cx < ref.cx
    if side == "right":
        return target.cx > ref.cx
    if side == "top":
        return target.cy < ref.cy
    return target.cy > ref.cy


def resolve(struct: tuple, shapes: Sequence[ShapeSpec], h: int, w: int) -> list:
    """Indices of scene shapes matching the expression; unique iff length 1."""
    if struct[0] == "attribute":
        _, color, kind = struct
        return [i for i, s in enumerate(shapes) if s.color == color and s.kind == kind]
    if struct[0] == "attribute_side":
        _, color, kind, side = struct
        return [
            i
            for i, s in enumerate(shapes)
            if s.color == color and s.kind == kind and _on_side(s, side, h, w)
        ]
    if struct[0] == "relation":
        _, kind, side, ref_color, ref_kind = struct
        refs = [i for i, s in enumerate(shapes) if s.color == ref_color and s.kind == ref_kind]
        if len(refs) != 1:
            return []
        ref = shapes[refs[0]]
        return [
            i
            for i, s in enumerate(shapes)
            if i != refs[0] and s.kind == kind and _side_of(s, ref, side)
        ]
    raise ConfigError(f"unknown template {struct[0]!r}")


# ---------------------------------------------------------------------------
# scene generation


def _place_shapes(rng: np.random.Generator, grammar: GrammarConfig) -> Optional[list]:
    n = int(rng.integers(grammar.min_shapes, grammar.max_shapes + 1))
    size = grammar.image_size
    placed: list[ShapeSpec] = []
    for _ in range(n):
        ok = False
        for _ in range(60):
            s = float(rng.uniform(grammar.size_frac_min, grammar.size_frac_max) * size)
            kind = str(rng.choice(grammar.shapes))
            color = str(rng.choice(grammar.colors))
            margin = (s * np.sqrt(2.0) if kind != "circle" else s) + 1.0
            if 2 * margin >= size:
                continue
            cx = float(rng.uniform(margin, size - margin))
            cy = float(rng.uniform(margin, size - margin))
            cand = ShapeSpec(kind, color, cx, cy, s)
            if all(
                np.hypot(cand.cx - p.cx, cand.cy - p.cy)
                > cand.bounding_radius + p.bounding_radius + 1.0
                for p in placed
            ):
                placed.append(cand)
                ok = True
                break
        if not ok:
            return None
    return placed


def _candidate_expression(
    rng: np.random.Generator,
    template: str,
    target: int,
    shapes: Sequence[ShapeSpec],
    grammar: GrammarConfig,
) -> Optional[tuple]:
    t = shapes[target]
    size = grammar.image_size
    if template == "attribute":
        return ("attribute", t.color, t.kind)
    if template == "attribute_side":
        sides = [s for s in SIDES if _on_side(t, s, size, size)]
        if not sides:
            return None
        return ("attribute_side", t.color, t.kind, str(rng.choice(sides)))
    others = [i for i in range(len(shapes)) if i != target]
    if not others:
        return None
    ref = shapes[int(rng.choice(others))]
    sides = [s for s in SIDES if _side_of(t, ref, s)]
    if not sides:
        return None
    return ("relation", t.kind, str(rng.choice(sides)), ref.color, ref.kind)


def generate_scene(seed: int, grammar: GrammarConfig) -> Sample:
    """Build one sample; raises GenerationError after 100 failed attempts."""
    rng = np.random.default_rng(seed)
    size = grammar.image_size
    for _ in range(100):
        shapes = _place_shapes(rng, grammar)
        if shapes is None:
            continue
        for _ in range(12):
            template = str(rng.choice(grammar.templates))
            target = int(rng.integers(len(shapes)))
            struct = _candidate_expression(rng, template, target, shapes, grammar)
            if struct is None:
                continue
            if resolve(struct, shapes, size, size) == [target]:
                gt = rasterize(shapes[target], size, size).astype(np.uint8)
                return Sample(
                    image=render_image(shapes, size, size),
                    expression=render_expression(struct),
                    gt_mask=gt,
                    shapes=list(shapes),
                    target_index=target,
                    expression_struct=struct,
                    seed=seed,
                )
    raise GenerationError(f"no unique scene after 100 attempts (seed {seed})")


def sample_seed(split_seed: int, index: int) -> int:
    return int(np.random.SeedSequence((split_seed, index)).generate_state(1)[0])


def generate_split(split_seed: int, count: int, grammar: GrammarConfig) -> list:
    return [generate_scene(sample_seed(split_seed, i), grammar) for i in range(count)]


def vocabulary_for(grammar: GrammarConfig) -> Vocabulary:
    words = tuple(grammar.colors) + tuple(grammar.shapes) + SIDES + FUNCTION_WORDS
    return Vocabulary.from_words(words)


# ---------------------------------------------------------------------------
# on-disk format


def grammar_to_pairs(grammar: GrammarConfig) -> dict:
    return {
        "format": "1",
        "image_size": str(grammar.image_size),
        "grammar.colors": ",".join(grammar.colors),
        "grammar.shapes": ",".join(grammar.shapes),
        "grammar.min_shapes": str(grammar.min_shapes),
        "grammar.max_shapes": str(grammar.max_shapes),
        "grammar.size_frac_min": repr(grammar.size_frac_min),
        "grammar.size_frac_max": repr(grammar.size_frac_max),
        "grammar.templates": ",".join(grammar.templates),
    }


def grammar_from_pairs(pairs: dict) -> GrammarConfig:
    kwargs = {}
    if "image_size" in pairs:
        kwargs["image_size"] = int(pairs["image_size"])
    for key, cast in [
        ("min_shapes", int),
        ("max_shapes", int),
        ("size_frac_min", float),
        ("size_frac_max", float),
    ]:
        if f"grammar.{key}" in pairs:
            kwargs[key] = cast(pairs[f"grammar.{key}"])
    for key in ("colors", "shapes", "templates"):
        if f"grammar.{key}" in pairs:
            kwargs[key] = tuple(pairs[f"grammar.{key}"].split(","))
    return GrammarConfig(**kwargs)


def split_specs_from_pairs(pairs: dict) -> dict:
    """{split_name: (seed, count)} from manifest pairs."""
    specs = {}
    for key, value in pairs.items():
        if key.startswith("split.") and key.endswith(".seed"):
            name = key[len("split.") : -len(".seed")]
            specs[name] = (int(value), int(pairs[f"split.{name}.count"]))
    if not specs:
        raise ConfigError("manifest declares no splits")
    return specs


def generate_from_manifest(pairs: dict) -> tuple:
    """(splits dict, grammar, vocabulary) regenerated from manifest pairs."""
    grammar = grammar_from_pairs(pairs)
    splits = {
        name: generate_split(seed, count, grammar)
        for name, (seed, count) in sorted(split_specs_from_pairs(pairs).items())
    }
    return splits, grammar, vocabulary_for(grammar)


def save_dataset(root, splits: dict, grammar: GrammarConfig, manifest: dict) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_kv_file(root / "MANIFEST", manifest)
    vocabulary_for(grammar).save(root / "vocab.txt")
    for name, samples in splits.items():
        sdir = root / name
        (sdir / "images").mkdir(parents=True, exist_ok=True)
        (sdir / "masks").mkdir(parents=True, exist_ok=True)
        with open(sdir / "samples.jsonl", "w") as f:
            for i, s in enumerate(samples):
                write_ppm(sdir / "images" / f"{i:05d}.ppm", s.image)
                write_pgm(sdir / "masks" / f"{i:05d}.pgm", (s.gt_mask * 255).astype(np.uint8))
                record = {
                    "index": i,
                    "seed": s.seed,
                    "expression": s.expression,
                    "template": s.expression_struct[0],
                    "target": s.target_index,
                    "shapes": [sp.to_dict() for sp in s.shapes],
                }
                f.write(json.dumps(record, sort_keys=True) + "\n")


def load_split(root, name: str) -> list:
    sdir = Path(root) / name
    samples = []
    for line in (sdir / "samples.jsonl").read_text().splitlines():
        rec = json.loads(line)
        i = rec["index"]
        image = read_ppm(sdir / "images" / f"{i:05d}.ppm")
        gt = (read_pgm(sdir / "masks" / f"{i:05d}.pgm") > 127).astype(np.uint8)
        samples.append(
            Sample(
                image=image,
                expression=rec["expression"],
                gt_mask=gt,
                shapes=[ShapeSpec.from_dict(d) for d in rec["shapes"]],
                target_index=rec["target"],
                expression_struct=parse_expression(rec["expression"]),
                seed=rec["seed"],
            )
        )
    return samples


def load_manifest(root) -> dict:
    return parse_kv_text((Path(root) / "MANIFEST").read_text())


def default_manifest(image_size: int = 64) -> dict:
    pairs = grammar_to_pairs(GrammarConfig(image_size=image_size))
    pairs.update(
        {
            "split.train.seed": "1000",
            "split.train.count": "64",
            "split.val.seed": "2000",
            "split.val.count": "32",
        }
    )
    return pairs
