"""Procedural desk-scale corpus: templated GeoQA-style problems with drawn diagrams.

Every template carries its own closed-form answer, independent of the program
executor, and a gold program whose execution must agree with it.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .dataset import GeometryProblem, validate_record
from .geoprog import choice_tolerance, default_vocabulary
from .knowledge import KnowledgeBase, sample_knowledge_base

IMAGE_SIZE = 224


@dataclass(frozen=True)
class Template:
    name: str
    category: str
    text: str
    sample: Callable[[random.Random], tuple]
    answer: Callable[..., float]
    program: str
    knowledge: tuple[tuple[str, ...], ...]
    diagram: str


def _ri(lo, hi):
    return lambda rng: (rng.randint(lo, hi),)


def _two_angles(rng):
    a = rng.randint(20, 100)
    return a, rng.randint(15, 160 - a)


def _leg_pair(rng):
    c = rng.randint(5, 30)
    return c, rng.randint(2, c - 1)


def _acute_and_len(rng):
    return rng.randint(10, 80), rng.randint(2, 30)


def _two_lengths(rng):
    return rng.randint(2, 30), rng.randint(2, 30)


S = math.sin
R = math.radians

TEMPLATES = (
    # -- angles --------------------------------------------------------------
    Template("parallel_bisector", "Angle",
             "{pre}AB ∥ CD, AE bisects ∠CAB and meets CD at point E. If ∠ACD = {0}°, then the degree of ∠AEC is ()",
             _ri(20, 160), lambda a: (180 - a) / 2, "Minus C_3 N_0 ; Half V_0",
             (("Parallel Lines",), ("Parallel Lines", "Angle Bisector")), "parallel"),
    Template("triangle_third_angle", "Angle",
             "{pre}in triangle ABC, ∠A = {0}° and ∠B = {1}°, then the degree of ∠C is ()",
             _two_angles, lambda a, b: 180 - (a + b), "Add N_0 N_1 ; Minus C_3 V_0",
             (("Triangle Angle Sum",), ("Triangle Angle Sum",)), "triangle"),
    Template("line_supplement", "Angle",
             "{pre}point O lies on line AB and ∠AOC = {0}°, then the degree of ∠BOC is ()",
             _ri(10, 170), lambda a: 180 - a, "Minus C_3 N_0",
             (("Supplementary Angles",),), "ray"),
    Template("right_triangle_acute", "Angle",
             "{pre}in right triangle ABC, ∠C is a right angle and ∠A = {0}°, then the degree of ∠B is ()",
             _ri(10, 80), lambda a: 90 - a, "Minus C_2 N_0",
             (("Right Triangle Acute Angles",),), "right_triangle"),
    Template("thales", "Angle",
             "{pre}AB is the diameter of circle O and point C is on the circle. If ∠ABC = {0}°, then the degree of ∠BAC is ()",
             _ri(10, 80), lambda a: 90 - a, "Minus C_2 N_0",
             (("Thales Theorem", "Right Triangle Acute Angles"),), "circle_diameter"),
    Template("inscribed_central", "Angle",
             "{pre}points A, B and C are on circle O and ∠ACB = {0}°, then the degree of the central angle ∠AOB is ()",
             _ri(10, 85), lambda a: 2 * a, "Double N_0",
             (("Inscribed Angle Theorem",),), "circle_inscribed"),
    Template("isosceles_base", "Angle",
             "{pre}in isosceles triangle ABC with AB = AC, the apex angle ∠A = {0}°, then the degree of the base angle ∠B is ()",
             _ri(20, 160), lambda a: (180 - a) / 2, "Minus C_3 N_0 ; Half V_0",
             (("Triangle Angle Sum",), ("Isosceles Triangle",)), "isosceles"),
    Template("equilateral_extension", "Angle",
             "{pre}triangle ABC is equilateral and point D is on the extension of BC. If ∠ADC = {0}°, then the degree of ∠CAD is ()",
             _ri(5, 55), lambda a: 60 - a, "Minus C_1 N_0",
             (("Equilateral Triangle", "Exterior Angle Theorem"),), "equilateral"),
    Template("regular_polygon", "Angle",
             "{pre}each interior angle of a regular polygon with {0} sides is ()",
             lambda rng: (rng.choice((3, 4, 5, 6, 8, 9, 10, 12)),), lambda n: 180 * (n - 2) / n,
             "Div C_4 N_0 ; Minus C_3 V_0",
             (("Regular Polygon Angles",), ("Supplementary Angles",)), "polygon"),
    Template("vertical_bisector", "Angle",
             "{pre}lines AB and CD intersect at point O and OE bisects ∠BOD. If ∠AOC = {0}°, then the degree of ∠BOE is ()",
             _ri(20, 160), lambda a: a / 2, "Half N_0",
             (("Vertical Angles", "Angle Bisector"),), "intersect"),
    Template("triangle_sixth", "Angle",
             "{pre}in triangle ABC, ∠A = {0}° and ∠B is one sixth of a straight angle, then the degree of ∠C is ()",
             _ri(10, 140), lambda a: 150 - a, "Minus C_3 N_0 ; Minus V_0 C_0",
             (("Triangle Angle Sum",), ("Triangle Angle Sum",)), "triangle"),
    # -- lengths -------------------------------------------------------------
    Template("hypotenuse", "Length",
             "{pre}in right triangle ABC, ∠C is a right angle, AC = {0} and BC = {1}, then the length of AB is ()",
             _two_lengths, lambda a, b: math.hypot(a, b), "PythHyp N_0 N_1",
             (("Pythagorean Theorem",),), "right_triangle_legs"),
    Template("missing_leg", "Length",
             "{pre}in right triangle ABC, ∠C is a right angle, the hypotenuse AB = {0} and AC = {1}, then the length of BC is ()",
             _leg_pair, lambda c, a: math.sqrt((c - a) * (c + a)), "PythLeg N_0 N_1",
             (("Pythagorean Theorem",),), "right_triangle_hyp"),
    Template("midline", "Length",
             "{pre}D and E are the midpoints of AB and AC. If BC = {0}, then the length of DE is ()",
             _ri(2, 40), lambda a: a / 2, "Half N_0",
             (("Triangle Midline Theorem",),), "midline"),
    Template("sine_side", "Length",
             "{pre}in right triangle ABC, ∠C is a right angle, ∠A = {0}° and AB = {1}, then the length of BC is ()",
             _acute_and_len, lambda a, c: c * S(R(a)), "SinDeg N_0 ; Mul N_1 V_0",
             (("Sine Ratio",), ("Sine Ratio",)), "right_triangle"),
    Template("cosine_side", "Length",
             "{pre}in right triangle ABC, ∠C is a right angle, ∠A = {0}° and AB = {1}, then the length of AC is ()",
             _acute_and_len, lambda a, c: c * S(R(90 - a)), "CosDeg N_0 ; Mul N_1 V_0",
             (("Cosine Ratio",), ("Cosine Ratio",)), "right_triangle"),
    Template("tangent_side", "Length",
             "{pre}in right triangle ABC, ∠C is a right angle, ∠A = {0}° and AC = {1}, then the length of BC is ()",
             _acute_and_len, lambda a, b: b * S(R(a)) / S(R(90 - a)), "TanDeg N_0 ; Mul N_1 V_0",
             (("Tangent Ratio",), ("Tangent Ratio",)), "right_triangle"),
    Template("square_diagonal", "Length",
             "{pre}the side length of square ABCD is {0}, then the length of the diagonal AC is ()",
             _ri(2, 30), lambda a: a * math.sqrt(2), "Square N_0 ; Double V_0 ; Sqrt V_1",
             (("Square Properties", "Pythagorean Theorem"), ("Pythagorean Theorem",), ("Pythagorean Theorem",)),
             "square"),
    Template("rectangle_perimeter", "Length",
             "{pre}the length of rectangle ABCD is {0} and the width is {1}, then its perimeter is ()",
             _two_lengths, lambda a, b: 2 * a + 2 * b, "Add N_0 N_1 ; Double V_0",
             (("Rectangle Perimeter",), ("Rectangle Perimeter",)), "rectangle"),
    # -- other / area --------------------------------------------------------
    Template("circle_area", "Other",
             "{pre}the radius of circle O is {0}, then the area of the circle is ()",
             _ri(1, 20), lambda r: math.pi * r * r, "Square N_0 ; Mul C_5 V_0",
             (("Circle Area",), ("Circle Area",)), "circle"),
    Template("triangle_area", "Other",
             "{pre}in triangle ABC, the base BC = {0} and the height AD = {1}, then the area of triangle ABC is ()",
             _two_lengths, lambda b, h: b * h / 2, "Mul N_0 N_1 ; Half V_0",
             (("Triangle Area",), ("Triangle Area",)), "altitude"),
    Template("rectangle_area", "Other",
             "{pre}the length of rectangle ABCD is {0} and the width is {1}, then its area is ()",
             _two_lengths, lambda a, b: a * b, "Mul N_0 N_1",
             (("Rectangle Area",),), "rectangle"),
    Template("arc_length", "Other",
             "{pre}the radius of circle O is {0} and the central angle ∠AOB = {1}°, then the length of arc AB is ()",
             lambda rng: (rng.randint(2, 20), rng.choice(range(20, 340, 10))),
             lambda r, a: a * math.pi * r / 180, "Div N_1 C_3 ; Mul C_5 V_0 ; Mul V_1 N_0",
             (("Arc Length",), ("Arc Length",), ("Arc Length",)), "sector"),
    Template("right_triangle_area", "Other",
             "{pre}in right triangle ABC, ∠C is a right angle, the hypotenuse AB = {0} and AC = {1}, then the area of triangle ABC is ()",
             _leg_pair, lambda c, a: a * math.sqrt(c * c - a * a) / 2, "PythLeg N_0 N_1 ; Mul V_0 N_1 ; Half V_1",
             (("Pythagorean Theorem",), ("Triangle Area",), ("Triangle Area",)), "right_triangle_hyp"),
)

_PREFIXES = ("As shown in the figure, ", "In the figure, ", "Given that ")


# ---------------------------------------------------------------------------
# diagrams

def _font():
    try:
        return ImageFont.load_default(size=13)
    except TypeError:
        return ImageFont.load_default()


def _label(draw, xy, text, font):
    draw.text((xy[0] - 4, xy[1] - 7), text, fill=0, font=font)


def _polar(center, radius, deg):
    return center[0] + radius * math.cos(R(deg)), center[1] - radius * math.sin(R(deg))


def _triangle_from_angles(a, b, size, rng):
    # base BC horizontal, apex A; angle a at A, b at B
    c = 180 - a - b
    base = size * 0.6
    bx, by = size * 0.2 + rng.uniform(-6, 6), size * 0.78
    # law of sines: AB / sin(C) = BC / sin(A)
    ab = base * math.sin(R(c)) / max(math.sin(R(a)), 1e-3)
    scale = min(1.0, (size * 0.65) / max(ab, 1e-3))
    ab *= scale
    B = (bx, by)
    C = (bx + base * scale, by)
    A = (bx + ab * math.cos(R(b)), by - ab * math.sin(R(b)))
    return A, B, C


def draw_diagram(kind: str, nums: tuple, rng: random.Random, size: int = IMAGE_SIZE) -> np.ndarray:
    im = Image.new("L", (size, size), 255)
    d = ImageDraw.Draw(im)
    f = _font()
    w = 2
    cx, cy = size / 2 + rng.uniform(-8, 8), size / 2 + rng.uniform(-8, 8)

    if kind == "parallel":
        a = nums[0]
        y1, y2 = size * 0.3, size * 0.72
        A = (size * 0.35 + rng.uniform(-10, 10), y1)
        C = (A[0] + (y2 - y1) / math.tan(R(max(min(a, 170), 10))), y2)
        d.line([(10, y1), (size - 10, y1)], fill=0, width=w)
        d.line([(10, y2), (size - 10, y2)], fill=0, width=w)
        d.line([A, C], fill=0, width=w)
        E = (C[0] + (y2 - y1) * 0.9, y2)
        d.line([A, E], fill=0, width=w)
        for p, t in ((A, "A"), ((size - 16, y1 - 10), "B"), (C, "C"), ((size - 16, y2 + 10), "D"), (E, "E")):
            _label(d, (p[0], p[1] + (-12 if p[1] < size / 2 else 12)), t, f)
    elif kind in ("triangle", "isosceles", "midline", "altitude"):
        if kind == "triangle" and len(nums) == 2:
            A, B, C = _triangle_from_angles(nums[0], nums[1], size, rng)
        elif kind == "isosceles":
            apex = nums[0]
            base_angle = (180 - apex) / 2
            A, B, C = _triangle_from_angles(apex, base_angle, size, rng)
        else:
            A = (cx + rng.uniform(-30, 30), size * 0.18)
            B, C = (size * 0.15, size * 0.8), (size * 0.85, size * 0.8)
        d.polygon([A, B, C], outline=0, width=w)
        for p, t in ((A, "A"), (B, "B"), (C, "C")):
            _label(d, (p[0], p[1] + (-12 if p is A else 12)), t, f)
        if kind == "midline":
            D = ((A[0] + B[0]) / 2, (A[1] + B[1]) / 2)
            E = ((A[0] + C[0]) / 2, (A[1] + C[1]) / 2)
            d.line([D, E], fill=0, width=w)
            _label(d, (D[0] - 10, D[1]), "D", f)
            _label(d, (E[0] + 10, E[1]), "E", f)
        if kind == "altitude":
            D = (A[0], B[1])
            d.line([A, D], fill=0, width=1)
            _label(d, (D[0], D[1] + 12), "D", f)
    elif kind.startswith("right_triangle"):
        if kind == "right_triangle_legs":
            a = math.degrees(math.atan2(nums[1], nums[0]))
        elif kind == "right_triangle_hyp":
            a = math.degrees(math.acos(nums[1] / nums[0]))
        else:
            a = nums[0]
        a = min(max(a, 12), 65)
        C = (size * 0.2, size * 0.8)
        leg = size * 0.6
        A = (C[0] + leg, C[1])
        B = (C[0], C[1] - min(leg * math.tan(R(a)), size * 0.7))
        d.polygon([A, B, C], outline=0, width=w)
        d.rectangle([C[0], C[1] - 10, C[0] + 10, C[1]], outline=0)
        for p, t, off in ((A, "A", (8, 8)), (B, "B", (-10, 0)), (C, "C", (-10, 8))):
            _label(d, (p[0] + off[0], p[1] + off[1]), t, f)
    elif kind == "ray":
        a = nums[0]
        O = (cx, size * 0.65)
        d.line([(15, O[1]), (size - 15, O[1])], fill=0, width=w)
        Cp = _polar(O, size * 0.4, 180 - a)
        d.line([O, Cp], fill=0, width=w)
        _label(d, (18, O[1] + 12), "A", f)
        _label(d, (size - 18, O[1] + 12), "B", f)
        _label(d, (O[0], O[1] + 12), "O", f)
        _label(d, (Cp[0], Cp[1] - 10), "C", f)
    elif kind == "intersect":
        a = nums[0]
        O = (cx, cy)
        r = size * 0.42
        base = rng.uniform(-10, 10)
        pts = {"A": _polar(O, r, 180 + base), "B": _polar(O, r, base),
               "C": _polar(O, r, 180 + base - a), "D": _polar(O, r, base - a)}
        d.line([pts["A"], pts["B"]], fill=0, width=w)
        d.line([pts["C"], pts["D"]], fill=0, width=w)
        E = _polar(O, r * 0.8, base - a / 2)
        d.line([O, E], fill=0, width=1)
        for t, p in pts.items():
            _label(d, p, t, f)
        _label(d, E, "E", f)
        _label(d, (O[0], O[1] - 12), "O", f)
    elif kind in ("circle_diameter", "circle_inscribed", "circle", "sector"):
        r = size * 0.36
        O = (cx, cy)
        d.ellipse([O[0] - r, O[1] - r, O[0] + r, O[1] + r], outline=0, width=w)
        d.ellipse([O[0] - 2, O[1] - 2, O[0] + 2, O[1] + 2], fill=0)
        _label(d, (O[0] + 8, O[1] + 8), "O", f)
        if kind == "circle_diameter":
            A, B = _polar(O, r, 180), _polar(O, r, 0)
            Cp = _polar(O, r, 180 - 2 * nums[0])
            d.line([A, B], fill=0, width=w)
            d.polygon([A, B, Cp], outline=0, width=1)
            for p, t in ((A, "A"), (B, "B"), (Cp, "C")):
                _label(d, p, t, f)
        elif kind == "circle_inscribed":
            start = rng.uniform(200, 250)
            A, B = _polar(O, r, start), _polar(O, r, start + 2 * nums[0])
            Cp = _polar(O, r, start + 2 * nums[0] + (360 - 2 * nums[0]) / 2)
            d.line([A, Cp, B], fill=0, width=w)
            d.line([A, O, B], fill=0, width=1)
            for p, t in ((A, "A"), (B, "B"), (Cp, "C")):
                _label(d, p, t, f)
        elif kind == "circle":
            P = _polar(O, r, rng.uniform(0, 360))
            d.line([O, P], fill=0, width=w)
        else:
            a = nums[1]
            start = rng.uniform(0, 90)
            A, B = _polar(O, r, start), _polar(O, r, start + a)
            d.line([O, A], fill=0, width=w)
            d.line([O, B], fill=0, width=w)
            d.arc([O[0] - r, O[1] - r, O[0] + r, O[1] + r], -(start + a), -start, fill=0, width=w + 2)
            _label(d, A, "A", f)
            _label(d, B, "B", f)
    elif kind == "equilateral":
        B = (size * 0.12, size * 0.75)
        side = size * 0.42
        Cp = (B[0] + side, B[1])
        A = (B[0] + side / 2, B[1] - side * math.sqrt(3) / 2)
        a = max(nums[0], 5)
        D = (min(Cp[0] + (A[1] - B[1]) * -1 / math.tan(R(a)) - side / 2, size - 10), B[1])
        d.polygon([A, B, Cp], outline=0, width=w)
        d.line([Cp, D], fill=0, width=w)
        d.line([A, D], fill=0, width=w)
        for p, t in ((A, "A"), (B, "B"), (Cp, "C"), (D, "D")):
            _label(d, (p[0], p[1] + (12 if p is not A else -12)), t, f)
    elif kind == "polygon":
        n = nums[0]
        r = size * 0.38
        rot = rng.uniform(0, 360 / n)
        pts = [_polar((cx, cy), r, rot + 360 * k / n) for k in range(n)]
        d.polygon(pts, outline=0, width=w)
    elif kind in ("square", "rectangle"):
        if kind == "square":
            wdt = hgt = size * 0.55
        else:
            ratio = nums[1] / max(nums[0], 1)
            wdt = size * 0.7
            hgt = max(min(wdt * ratio, size * 0.7), 20)
        x0, y0 = cx - wdt / 2, cy - hgt / 2
        A, B, Cp, D = (x0, y0), (x0, y0 + hgt), (x0 + wdt, y0 + hgt), (x0 + wdt, y0)
        d.polygon([A, B, Cp, D], outline=0, width=w)
        if kind == "square":
            d.line([A, Cp], fill=0, width=1)
        for p, t, off in ((A, "A", (-8, -8)), (B, "B", (-8, 8)), (Cp, "C", (8, 8)), (D, "D", (8, -8))):
            _label(d, (p[0] + off[0], p[1] + off[1]), t, f)
    else:
        raise ValueError(f"unknown diagram kind {kind!r}")
    return np.asarray(im, dtype=np.uint8)


# ---------------------------------------------------------------------------
# choices

def make_choices(rng: random.Random, answer: float) -> tuple[list[float], int]:
    ans = round(answer, 2)
    cands = [ans * 2, ans / 2, ans + 10, ans - 10, ans + 20, ans - 20, 180 - ans, 90 - ans,
             ans * 1.5, ans + 5, ans * 0.75, ans + rng.randint(1, 30), ans * 3, ans + 1]
    rng.shuffle(cands)
    gap = max(1.0, 4 * choice_tolerance(ans))
    picked: list[float] = []
    for c in cands:
        c = round(c, 2)
        if c <= 0 or abs(c - ans) < gap or any(abs(c - p) < gap for p in picked):
            continue
        picked.append(c)
        if len(picked) == 3:
            break
    k = 2
    while len(picked) < 3:
        c = round(ans + k * gap, 2)
        if all(abs(c - p) >= gap for p in picked):
            picked.append(c)
        k += 1
    choices = picked + [ans]
    rng.shuffle(choices)
    return choices, choices.index(ans)


# ---------------------------------------------------------------------------
# corpus

def _stream(seed: int):
    """Endless stream of (index, template, nums, rng), deduplicated by (template, nums)."""
    seen = set()
    i = 0
    while True:
        rng = random.Random(f"dualgeo:{seed}:{i}")
        tpl = TEMPLATES[rng.randrange(len(TEMPLATES))]
        nums = tpl.sample(rng)
        key = (tpl.name, nums)
        if key not in seen:
            seen.add(key)
            yield i, tpl, nums, rng
        i += 1


def synthesize_records(seed: int, count: int, skip: int = 0, kb: KnowledgeBase | None = None):
    """Generate ``count`` unique (record, diagram) pairs after skipping ``skip`` of the stream.

    Splits drawn as disjoint windows of one seed's stream never share a problem.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    kb = kb or sample_knowledge_base()
    out = []
    for k, (i, tpl, nums, rng) in enumerate(_stream(seed)):
        if k < skip:
            continue
        if len(out) == count:
            break
        text = tpl.text.format(*nums, pre=rng.choice(_PREFIXES))
        text = text[0].upper() + text[1:]
        choices, answer = make_choices(rng, tpl.answer(*nums))
        pid = f"syn{seed}-{i:06d}"
        rec = {
            "id": pid,
            "text": text,
            "image": f"images/{pid}.png",
            "choices": choices,
            "program": tpl.program,
            "knowledge": [sorted(kb.id_of(c) for c in step) for step in tpl.knowledge],
            "category": tpl.category,
            "answer": answer,
            "template": tpl.name,
        }
        out.append((rec, draw_diagram(tpl.diagram, nums, rng)))
    return out


def synthesize(seed: int, count: int, skip: int = 0, kb: KnowledgeBase | None = None):
    """In-memory corpus of validated GeometryProblems."""
    kb = kb or sample_knowledge_base()
    vocab = default_vocabulary()
    problems = []
    for rec, img in synthesize_records(seed, count, skip, kb):
        tokens, numbers, program, answer = validate_record(rec, vocab, len(kb))
        problems.append(GeometryProblem(
            id=rec["id"], text=rec["text"], tokens=tokens, numbers=numbers, diagram=img,
            choices=tuple(rec["choices"]), program=program, step_labels=rec["knowledge"],
            category=rec["category"], answer=answer))
    return problems


def write_corpus(out_dir, split: str, seed: int, count: int, skip: int = 0,
                 kb: KnowledgeBase | None = None) -> Path:
    kb = kb or sample_knowledge_base()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for rec, img in synthesize_records(seed, count, skip, kb):
        Image.fromarray(img).save(out / rec["image"], format="PNG")
        records.append(rec)
    doc = {"split": split, "seed": seed, "count": count, "skip": skip, "records": records}
    path = out / f"{split}.json"
    path.write_text(json.dumps(doc, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    kb.save(out / "knowledge_base.json")
    return path
