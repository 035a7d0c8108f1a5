"""Text protocol for interleaving masks and boxes with free text.

Surface forms:

    <ref>referred object</ref>
    <box>[x1,y1,x2,y2]</box>          integers, per-mille of the image side
    <mt_start>mt_3 mt_1021<mt_end>    space-separated token names

`parse` is total: any input yields an atom list or a CodecError carrying
the byte offset of the defect. `render(parse(t)) == t` for every string
render produces, and `parse(render(atoms)) == atoms` for canonical atom
lists (non-empty text atoms, no two adjacent).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

DEFAULT_CODEBOOK_SIZE = 1024
BOX_SCALE = 1000

REF_OPEN, REF_CLOSE = "<ref>", "</ref>"
BOX_OPEN, BOX_CLOSE = "<box>", "</box>"
MT_OPEN, MT_CLOSE = "<mt_start>", "<mt_end>"
RESERVED_MARKERS = (REF_OPEN, REF_CLOSE, BOX_OPEN, BOX_CLOSE, MT_OPEN, MT_CLOSE)

_MT_BODY = re.compile(r"mt_(\d+)( mt_(\d+))*\Z")
_MT_TOKEN = re.compile(r"mt_(\d+)\Z")


class CodecError(ValueError):
    """Render/parse failure; parse errors carry a byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"offset {offset}: {message}")
        self.offset = offset


class NoForegroundError(CodecError):
    """box_from_mask was given an empty mask."""


@dataclass(frozen=True)
class Text:
    text: str


@dataclass(frozen=True)
class Ref:
    text: str


@dataclass(frozen=True)
class Box:
    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        if not (0 <= self.x1 <= self.x2 < BOX_SCALE):
            raise CodecError(f"box x bounds must satisfy 0 <= x1 <= x2 < {BOX_SCALE}, got {self}")
        if not (0 <= self.y1 <= self.y2 < BOX_SCALE):
            raise CodecError(f"box y bounds must satisfy 0 <= y1 <= y2 < {BOX_SCALE}, got {self}")

    @property
    def body(self) -> str:
        return f"[{self.x1},{self.y1},{self.x2},{self.y2}]"


@dataclass(frozen=True)
class MaskTokens:
    tokens: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise CodecError("mask token span must be non-empty")
        if any(t < 0 for t in self.tokens):
            raise CodecError(f"mask token indices must be non-negative, got {self.tokens}")

    @property
    def body(self) -> str:
        return " ".join(f"mt_{t}" for t in self.tokens)


PromptAtom = Text | Ref | Box | MaskTokens


def _check_no_markers(text: str, what: str) -> None:
    for marker in RESERVED_MARKERS:
        if marker in text:
            raise CodecError(f"{what} contains reserved marker {marker!r} (injection)")


def render(atoms: list[PromptAtom], codebook_size: int = DEFAULT_CODEBOOK_SIZE) -> str:
    """Serialize atoms to protocol text, rejecting marker injection."""
    parts = []
    for atom in atoms:
        if isinstance(atom, Text):
            _check_no_markers(atom.text, "text atom")
            parts.append(atom.text)
        elif isinstance(atom, Ref):
            _check_no_markers(atom.text, "ref span")
            parts.append(f"{REF_OPEN}{atom.text}{REF_CLOSE}")
        elif isinstance(atom, Box):
            parts.append(f"{BOX_OPEN}{atom.body}{BOX_CLOSE}")
        elif isinstance(atom, MaskTokens):
            if any(t >= codebook_size for t in atom.tokens):
                bad = next(t for t in atom.tokens if t >= codebook_size)
                raise CodecError(f"mask token {bad} >= codebook size {codebook_size}")
            parts.append(f"{MT_OPEN}{atom.body}{MT_CLOSE}")
        else:
            raise CodecError(f"unknown atom type {type(atom).__name__}")
    return "".join(parts)


def _find_marker(text: str, start: int) -> tuple[int, str] | None:
    best = None
    for marker in RESERVED_MARKERS:
        pos = text.find(marker, start)
        if pos != -1 and (best is None or pos < best[0]):
            best = (pos, marker)
    return best


def _parse_box_body(body: str, offset: int) -> Box:
    m = re.fullmatch(r"\[(-?\d+),(-?\d+),(-?\d+),(-?\d+)\]", body)
    if m is None:
        raise CodecError(
            f"box body must be [x1,y1,x2,y2] with bare integers, got {body!r}", offset
        )
    x1, y1, x2, y2 = (int(g) for g in m.groups())
    for name, v in (("x1", x1), ("y1", y1), ("x2", x2), ("y2", y2)):
        if not 0 <= v < BOX_SCALE:
            raise CodecError(f"box {name}={v} outside [0, {BOX_SCALE})", offset)
    if x2 < x1:
        raise CodecError(f"x2 < x1 in box {body}", offset)
    if y2 < y1:
        raise CodecError(f"y2 < y1 in box {body}", offset)
    return Box(x1, y1, x2, y2)


def _parse_mt_body(body: str, offset: int, codebook_size: int) -> MaskTokens:
    if not body:
        raise CodecError("empty mask token span", offset)
    if _MT_BODY.fullmatch(body) is None:
        bad = next((p for p in body.split(" ") if _MT_TOKEN.fullmatch(p) is None), body)
        raise CodecError(f"token name {bad!r} does not match mt_<digits>", offset)
    tokens = tuple(int(part[3:]) for part in body.split(" "))
    for t in tokens:
        if t >= codebook_size:
            raise CodecError(f"token index {t} >= codebook size {codebook_size}", offset)
    return MaskTokens(tokens)


def parse(text: str, codebook_size: int = DEFAULT_CODEBOOK_SIZE) -> list[PromptAtom]:
    """Scan left to right, splitting on reserved markers.

    Interleaved free text is preserved as Text atoms; malformed spans
    raise CodecError with the byte offset of the opening marker.
    """
    atoms: list[PromptAtom] = []
    pos = 0
    while pos < len(text):
        hit = _find_marker(text, pos)
        if hit is None:
            atoms.append(Text(text[pos:]))
            break
        start, marker = hit
        if start > pos:
            atoms.append(Text(text[pos:start]))
        body_start = start + len(marker)
        if marker == REF_OPEN:
            end = text.find(REF_CLOSE, body_start)
            if end == -1:
                raise CodecError("unterminated <ref> span", start)
            atoms.append(Ref(text[body_start:end]))
            pos = end + len(REF_CLOSE)
        elif marker == BOX_OPEN:
            end = text.find(BOX_CLOSE, body_start)
            if end == -1:
                raise CodecError("unterminated <box> span", start)
            atoms.append(_parse_box_body(text[body_start:end], start))
            pos = end + len(BOX_CLOSE)
        elif marker == MT_OPEN:
            end = text.find(MT_CLOSE, body_start)
            if end == -1:
                raise CodecError("unterminated <mt_start> span", start)
            atoms.append(_parse_mt_body(text[body_start:end], start, codebook_size))
            pos = end + len(MT_CLOSE)
        else:
            raise CodecError(f"unmatched closing marker {marker}", start)
    return atoms


# ---------------------------------------------------------------------------
# Boxes from masks


def box_from_mask(mask: np.ndarray) -> Box:
    """Tight per-mille bounding box of the foreground, rounded outward.

    Pixel (row r, col c) occupies the cell [c, c+1) x [r, r+1) in pixel
    units, so mins floor and maxes take ceil((max+1) * scale / side) - 1;
    a full-frame mask maps to (0, 0, 999, 999) and mirroring a mask maps
    x to 999 - x exactly.
    """
    arr = np.asarray(mask)
    binary = arr > 0.5 if arr.dtype != bool else arr
    rows = np.flatnonzero(binary.any(axis=1))
    cols = np.flatnonzero(binary.any(axis=0))
    if rows.size == 0:
        raise NoForegroundError("mask has no foreground pixels")
    height, width = binary.shape
    x1 = math.floor(cols[0] * BOX_SCALE / width)
    y1 = math.floor(rows[0] * BOX_SCALE / height)
    x2 = math.ceil((cols[-1] + 1) * BOX_SCALE / width) - 1
    y2 = math.ceil((rows[-1] + 1) * BOX_SCALE / height) - 1
    return Box(x1, y1, x2, y2)


# ---------------------------------------------------------------------------
# Template bank


TASKS = ("mask-then-box", "box-to-mask", "points-to-mask", "grounding-only", "length-specified")

# number of {} placeholders each stored (task, role) pair must carry
TEMPLATE_ARITY = {
    ("mask-then-box", "instruction"): 1,
    ("mask-then-box", "response"): 2,
    ("box-to-mask", "instruction"): 2,
    ("points-to-mask", "instruction"): 1,
    ("mask-only", "response"): 1,
    ("grounding-only", "instruction"): 1,
    ("grounding-only", "response"): 1,
    ("length-specified", "instruction"): 4,
}

# tasks whose responses borrow another key's templates
_RESPONSE_KEY = {
    "box-to-mask": ("mask-only", "response"),
    "points-to-mask": ("mask-only", "response"),
    "length-specified": ("mask-then-box", "response"),
}


class TemplateBank:
    """Instruction/response templates keyed by (task, role)."""

    def __init__(self, templates: dict[tuple[str, str], list[str]]):
        for key, arity in TEMPLATE_ARITY.items():
            for tpl in templates.get(key, []):
                found = tpl.count("{}")
                if found != arity:
                    raise CodecError(
                        f"template for {key} has {found} placeholders, expected {arity}: {tpl!r}"
                    )
        self.templates = templates

    def get(self, task: str, role: str) -> list[str]:
        try:
            return self.templates[(task, role)]
        except KeyError:
            raise CodecError(f"no templates for task {task!r} role {role!r}") from None

    @classmethod
    def from_text(cls, text: str) -> "TemplateBank":
        templates: dict[tuple[str, str], list[str]] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CodecError(f"template line {lineno} is not task<TAB>role<TAB>template")
            task, role, template = parts
            templates.setdefault((task, role), []).append(template)
        return cls(templates)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "TemplateBank":
        if path is not None:
            return cls.from_text(Path(path).read_text())
        text = resources.files("masktok").joinpath("templates/bank.tsv").read_text()
        return cls.from_text(text)


def _fill(template: str, values: list[str]) -> str:
    parts = template.split("{}")
    if len(parts) - 1 != len(values):
        raise CodecError(
            f"template expects {len(parts) - 1} values, got {len(values)}: {template!r}"
        )
    out = [parts[0]]
    for value, part in zip(values, parts[1:]):
        out.append(value)
        out.append(part)
    return "".join(out)


def format_points(points) -> str:
    return "[" + ", ".join(f"({x},{y})" for x, y in points) + "]"


def build_sample(
    rng: np.random.Generator,
    bank: TemplateBank,
    task: str,
    ref_text: str | None = None,
    mask_tokens: tuple[int, ...] | None = None,
    box: Box | None = None,
    points=None,
    length: int | None = None,
    codebook_size: int = DEFAULT_CODEBOOK_SIZE,
) -> tuple[str, str]:
    """Fill one sampled instruction/response template pair for a task.

    Mask-then-box responses place the mask span strictly before the box
    span; box-to-mask puts the box in the instruction and the mask in the
    response, covering both token orders. When a box-prompted template
    needs points and none are given, the box center is used.
    """
    if task not in TASKS:
        raise CodecError(f"unknown task {task!r}")
    instruction_tpl = _choose(rng, bank.get(task, "instruction"))
    response_key = _RESPONSE_KEY.get(task, (task, "response"))
    response_tpl = _choose(rng, bank.get(*response_key))

    mask_span = None
    if mask_tokens is not None:
        mask_span = render([MaskTokens(tuple(mask_tokens))], codebook_size)

    if task == "mask-then-box":
        instruction = _fill(instruction_tpl, [_need(ref_text, "ref_text", task)])
        response = _fill(response_tpl, [_need(mask_span, "mask_tokens", task), _need(box, "box", task).body])
    elif task == "box-to-mask":
        the_box = _need(box, "box", task)
        if points is None:
            points = [((the_box.x1 + the_box.x2) // 2, (the_box.y1 + the_box.y2) // 2)]
        instruction = _fill(instruction_tpl, [the_box.body, format_points(points)])
        response = _fill(response_tpl, [_need(mask_span, "mask_tokens", task)])
    elif task == "points-to-mask":
        instruction = _fill(instruction_tpl, [format_points(_need(points, "points", task))])
        response = _fill(response_tpl, [_need(mask_span, "mask_tokens", task)])
    elif task == "grounding-only":
        instruction = _fill(instruction_tpl, [_need(ref_text, "ref_text", task)])
        response = _fill(response_tpl, [_need(box, "box", task).body])
    else:  # length-specified
        instruction = _fill(
            instruction_tpl,
            [_need(ref_text, "ref_text", task), "", "", str(_need(length, "length", task))],
        )
        response = _fill(response_tpl, [_need(mask_span, "mask_tokens", task), _need(box, "box", task).body])
    return instruction, response


def _choose(rng: np.random.Generator, options: list[str]) -> str:
    return options[int(rng.integers(len(options)))]


def _need(value, name: str, task: str):
    if value is None:
        raise CodecError(f"task {task!r} requires {name}")
    return value
