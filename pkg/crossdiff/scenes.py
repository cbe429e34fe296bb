"""
Synthetic scenes, referring expressions and grounding metrics.

Scenes are rooms with non-overlapping axis-aligned objects standing on a
floor plane; every object owns a block of points sampled inside its volume
and background points cover the floor. Randomness comes from a SplitMix64
generator so a seed reproduces a scene bit for bit on any platform:

    state += 0x9E3779B97F4A7C15
    z = (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)                     (all arithmetic mod 2**64)

Uniform floats take the top 53 bits of ``out``.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import PackingError, ShapeError, TemplateError
from .geomloss import Box3D, MaskLike, iou3d, mask_iou

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
BACKGROUND = -1

# (x extent range, y extent range, height range) per class
CLASS_SIZES: Dict[str, Tuple[Tuple[float, float], Tuple[float, float], Tuple[float, float]]] = {
    "chair": ((0.4, 0.6), (0.4, 0.6), (0.8, 1.0)),
    "table": ((0.8, 1.3), (0.6, 0.9), (0.7, 0.8)),
    "lamp": ((0.2, 0.3), (0.2, 0.3), (0.4, 0.6)),
    "shelf": ((0.8, 1.1), (0.3, 0.4), (1.2, 1.8)),
    "sofa": ((1.3, 1.8), (0.7, 0.9), (0.7, 0.9)),
    "cabinet": ((0.6, 0.9), (0.4, 0.6), (0.8, 1.2)),
}

COLORS: Dict[str, Tuple[float, float, float]] = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.2, 0.7, 0.25),
    "blue": (0.15, 0.3, 0.85),
    "yellow": (0.9, 0.85, 0.2),
    "white": (0.95, 0.95, 0.95),
    "black": (0.08, 0.08, 0.08),
    "brown": (0.5, 0.3, 0.15),
}

BACKGROUND_COLOR = (0.5, 0.5, 0.5)

FAMILIES = ("attribute", "explicit", "implicit")

# Relation phrases; implicit ones are grouped by the category they express.
EXPLICIT_PHRASES = {
    "left": "to the left of",
    "right": "to the right of",
    "behind": "behind",
    "front": "in front of",
}
IMPLICIT_PHRASES = {
    "physical": ("resting on", "leaning against", "attached to"),
    "functional": ("holding", "supporting"),
    "contextual": ("beside", "paired with"),
}

PAD, UNK = "<pad>", "<unk>"


class SplitMix64:
    """64-bit SplitMix generator."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randint(self, n: int) -> int:
        """Uniform integer in ``[0, n)``."""
        if n <= 0:
            raise ValueError("randint needs a positive bound")
        return self.next_u64() % n

    def choice(self, items: Sequence):
        return items[self.randint(len(items))]

    def weighted_choice(self, names: Sequence[str], weights: Sequence[float]) -> str:
        total = float(np.sum(weights))
        if total <= 0:
            raise ValueError("weights must have a positive sum")
        r = self.random() * total
        acc = 0.0
        for name, w in zip(names, weights):
            acc += w
            if r < acc:
                return name
        return names[-1]

    def shuffle(self, items: List) -> List:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


@dataclass
class SceneObject:
    instance_id: int
    cls: str
    box: Box3D
    color: str

    def to_dict(self):
        return {"instance_id": self.instance_id, "class": self.cls, "box": self.box.to_dict(),
                "attributes": {"color": self.color}}

    @classmethod
    def from_dict(cls, data) -> "SceneObject":
        return cls(data["instance_id"], data["class"], Box3D.from_dict(data["box"]),
                   data["attributes"]["color"])


@dataclass
class Scene:
    points: np.ndarray
    colors: np.ndarray
    instance_id: np.ndarray
    objects: List[SceneObject]
    seed: int = 0

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def object(self, instance_id: int) -> SceneObject:
        for obj in self.objects:
            if obj.instance_id == instance_id:
                return obj
        raise KeyError(f"Scene has no object {instance_id}")

    def same_class_count(self, instance_id: int) -> int:
        cls = self.object(instance_id).cls
        return sum(1 for obj in self.objects if obj.cls == cls)

    def target_mask(self, instance_id: int) -> np.ndarray:
        return (self.instance_id == instance_id).astype(np.float64)

    def features(self) -> np.ndarray:
        """Per-point ``[x, y, z, r, g, b]``."""
        return np.concatenate([self.points, self.colors], axis=1)

    def to_dict(self):
        return {
            "seed": self.seed,
            "points": [[*p, int(i)] for p, i in zip(self.points.tolist(), self.instance_id.tolist())],
            "colors": self.colors.tolist(),
            "objects": [obj.to_dict() for obj in self.objects],
        }

    @classmethod
    def from_dict(cls, data) -> "Scene":
        rows = np.asarray(data["points"], dtype=np.float64).reshape(-1, 4)
        return cls(points=rows[:, :3].copy(), colors=np.asarray(data["colors"], dtype=np.float64),
                   instance_id=rows[:, 3].astype(np.int64),
                   objects=[SceneObject.from_dict(o) for o in data["objects"]], seed=data.get("seed", 0))


@dataclass
class SceneConfig:
    n_points: int = 256
    n_objects: int = 4
    n_distractors: int = 1
    classes: Tuple[str, ...] = tuple(CLASS_SIZES)
    room_size: float = 5.0
    object_fraction: float = 0.75
    gap: float = 0.05
    max_retries: int = 200

    @classmethod
    def from_config(cls, config) -> "SceneConfig":
        return cls(n_points=config.get("scenes.n_points"), n_objects=config.get("scenes.n_objects"),
                   n_distractors=config.get("scenes.n_distractors"),
                   classes=tuple(config.get("scenes.classes")), room_size=config.get("scenes.room_size"))


def _place_box(rng: SplitMix64, cls: str, placed: List[Box3D], cfg: SceneConfig) -> Box3D:
    (wx, wy, h) = CLASS_SIZES[cls]
    for _ in range(cfg.max_retries):
        sx, sy, sz = rng.uniform(*wx), rng.uniform(*wy), rng.uniform(*h)
        x0 = rng.uniform(0.0, cfg.room_size - sx)
        y0 = rng.uniform(0.0, cfg.room_size - sy)
        candidate = Box3D([x0, y0, 0.0], [x0 + sx, y0 + sy, sz])
        padded = Box3D(candidate.lo - cfg.gap, candidate.hi + cfg.gap)
        if not any(padded.intersects(other) for other in placed):
            return candidate
    raise PackingError(f"Could not place a {cls} without overlap after {cfg.max_retries} attempts")


def generate_scene(seed: int, cfg: Optional[SceneConfig] = None) -> Scene:
    """
    Generate one scene.

    The first ``n_distractors + 1`` objects share a class so "multiple"
    expressions are available; the remaining classes are drawn freely.

    Raises:
        PackingError: the objects do not fit into the room.
    """
    cfg = cfg or SceneConfig()
    if cfg.n_objects < 1:
        raise ValueError("A scene needs at least one object")
    for cls in cfg.classes:
        if cls not in CLASS_SIZES:
            raise ValueError(f"Unknown object class '{cls}'")
    rng = SplitMix64(seed)

    first = rng.choice(cfg.classes)
    classes = [first] * min(cfg.n_distractors + 1, cfg.n_objects)
    while len(classes) < cfg.n_objects:
        classes.append(rng.choice(cfg.classes))

    boxes: List[Box3D] = []
    for cls in classes:
        boxes.append(_place_box(rng, cls, boxes, cfg))

    color_names = list(COLORS)
    per_object = max(int(cfg.n_points * cfg.object_fraction) // cfg.n_objects, 1)
    n_background = cfg.n_points - per_object * cfg.n_objects
    if n_background < 0:
        raise PackingError(f"{cfg.n_points} points cannot cover {cfg.n_objects} objects")

    rows, colors, ids, objects = [], [], [], []
    for inst, (cls, box) in enumerate(zip(classes, boxes)):
        color = rng.choice(color_names)
        pts = [[rng.uniform(box.lo[0], box.hi[0]), rng.uniform(box.lo[1], box.hi[1]),
                rng.uniform(0.02, box.hi[2])] for _ in range(per_object)]
        pts_arr = np.asarray(pts)
        rows.extend(pts)
        colors.extend([COLORS[color]] * per_object)
        ids.extend([inst] * per_object)
        objects.append(SceneObject(inst, cls, Box3D.bounding(pts_arr), color))
    for _ in range(n_background):
        rows.append([rng.uniform(0.0, cfg.room_size), rng.uniform(0.0, cfg.room_size), 0.0])
        colors.append(BACKGROUND_COLOR)
        ids.append(BACKGROUND)

    order = rng.shuffle(list(range(cfg.n_points)))
    return Scene(points=np.asarray(rows, dtype=np.float64)[order],
                 colors=np.asarray(colors, dtype=np.float64)[order],
                 instance_id=np.asarray(ids, dtype=np.int64)[order],
                 objects=objects, seed=seed)


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------

def build_vocabulary(classes: Sequence[str] = tuple(CLASS_SIZES)) -> Dict[str, int]:
    """Closed vocabulary over every word the templates can emit; ids are stable."""
    words = {"the"}
    words.update(classes)
    words.update(COLORS)
    for phrase in EXPLICIT_PHRASES.values():
        words.update(phrase.split())
    for phrases in IMPLICIT_PHRASES.values():
        for phrase in phrases:
            words.update(phrase.split())
    return {word: i for i, word in enumerate([PAD, UNK] + sorted(words))}


def tokenize(text: str, vocab: Mapping[str, int]) -> List[int]:
    return [vocab.get(word, vocab[UNK]) for word in text.lower().split()]


@dataclass
class Expression:
    scene_index: int
    text: str
    tokens: List[int]
    target: int
    tags: List[str]
    family: str
    target_token: int
    category: Optional[str] = None
    anchor: Optional[int] = None
    split: str = "train"

    def to_dict(self):
        return {
            "scene_index": self.scene_index, "text": self.text, "tokens": list(self.tokens),
            "target": self.target, "tags": list(self.tags), "family": self.family,
            "target_token": self.target_token, "category": self.category,
            "anchor": self.anchor, "split": self.split,
        }

    @classmethod
    def from_dict(cls, data) -> "Expression":
        return cls(**data)


def _nearest_other(scene: Scene, target: SceneObject) -> Optional[SceneObject]:
    best, best_d = None, None
    for obj in scene.objects:
        if obj.instance_id == target.instance_id:
            continue
        d = float(np.sum((obj.box.center - target.box.center) ** 2))
        if best_d is None or d < best_d:
            best, best_d = obj, d
    return best


def _explicit_relation(target: SceneObject, anchor: SceneObject) -> str:
    dx, dy = target.box.center[:2] - anchor.box.center[:2]
    if abs(dx) >= abs(dy):
        return EXPLICIT_PHRASES["left" if dx < 0 else "right"]
    return EXPLICIT_PHRASES["behind" if dy > 0 else "front"]


def generate_expression(scene: Scene, seed: int, weights: Optional[Mapping[str, float]] = None,
                        target: Optional[int] = None, vocab: Optional[Mapping[str, int]] = None,
                        scene_index: int = 0) -> Expression:
    """
    Fill one template for ``target`` (random when omitted).

    ``weights`` maps template families to sampling weights. Relation
    families need a second object; when the sampled family is unavailable
    the remaining families are tried in weight order.

    Raises:
        TemplateError: no family with positive weight applies.
    """
    weights = dict(weights or {"attribute": 1.0, "explicit": 1.0, "implicit": 1.0})
    vocab = vocab or build_vocabulary()
    rng = SplitMix64(seed)
    if not scene.objects:
        raise TemplateError("Scene has no objects to refer to")
    obj = scene.object(target) if target is not None else rng.choice(scene.objects)
    anchor = _nearest_other(scene, obj)

    families = [f for f in FAMILIES if weights.get(f, 0.0) > 0]
    if not families:
        raise TemplateError("No template family has a positive weight")
    family = rng.weighted_choice(families, [weights[f] for f in families])
    if family != "attribute" and anchor is None:
        fallback = [f for f in families if f == "attribute"]
        if not fallback:
            raise TemplateError(f"Template family '{family}' needs a second object")
        family = "attribute"

    category = None
    if family == "attribute":
        text = f"the {obj.color} {obj.cls}"
        target_token = 2
    elif family == "explicit":
        text = f"the {obj.cls} {_explicit_relation(obj, anchor)} the {anchor.cls}"
        target_token = 1
    else:
        category = rng.choice(list(IMPLICIT_PHRASES))
        phrase = rng.choice(IMPLICIT_PHRASES[category])
        text = f"the {obj.cls} {phrase} the {anchor.cls}"
        target_token = 1

    tags = ["multiple" if scene.same_class_count(obj.instance_id) >= 2 else "unique"]
    if family == "implicit":
        tags.append("implicit")
    return Expression(scene_index=scene_index, text=text, tokens=tokenize(text, vocab),
                      target=obj.instance_id, tags=sorted(tags), family=family,
                      target_token=target_token, category=category,
                      anchor=None if family == "attribute" else anchor.instance_id)


@dataclass
class Corpus:
    scenes: List[Scene] = field(default_factory=list)
    expressions: List[Expression] = field(default_factory=list)

    def samples(self) -> List[Tuple[Scene, Expression]]:
        return [(self.scenes[e.scene_index], e) for e in self.expressions]

    def to_dict(self):
        return {"scenes": [s.to_dict() for s in self.scenes],
                "expressions": [e.to_dict() for e in self.expressions]}

    @classmethod
    def from_dict(cls, data) -> "Corpus":
        return cls([Scene.from_dict(s) for s in data["scenes"]],
                   [Expression.from_dict(e) for e in data["expressions"]])


def generate_corpus(seed: int, n_scenes: int, cfg: Optional[SceneConfig] = None,
                    expressions_per_scene: int = 1, weights: Optional[Mapping[str, float]] = None,
                    split: str = "train") -> Corpus:
    """Scenes use seeds ``seed, seed + 1, ...``; expression seeds are derived from the scene seed."""
    vocab = build_vocabulary(cfg.classes if cfg else tuple(CLASS_SIZES))
    corpus = Corpus()
    for i in range(n_scenes):
        scene = generate_scene(seed + i, cfg)
        corpus.scenes.append(scene)
        for j in range(expressions_per_scene):
            expr = generate_expression(scene, (seed + i) * 1000003 + j, weights, vocab=vocab, scene_index=i)
            expr.split = split
            corpus.expressions.append(expr)
    logger.info("Generated %d scenes / %d expressions from seed %d", n_scenes, len(corpus.expressions), seed)
    return corpus


def save_corpus(path: Union[str, Path], corpus: Corpus):
    with open(path, "w") as f:
        json.dump(corpus.to_dict(), f)


def load_corpus(path: Union[str, Path]) -> Corpus:
    with open(path, "r") as f:
        return Corpus.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

Geometry = Union[Box3D, MaskLike]


def _iou(pred: Geometry, gt: Geometry) -> float:
    if isinstance(pred, Box3D) and isinstance(gt, Box3D):
        return iou3d(pred, gt)
    return mask_iou(pred, gt)


def acc_at_iou(preds: Sequence[Geometry], gts: Sequence[Geometry], thresh: float) -> float:
    """Fraction of predictions whose IoU with the ground truth is at least ``thresh``."""
    if len(preds) != len(gts):
        raise ShapeError(f"acc_at_iou: {len(preds)} predictions for {len(gts)} ground truths")
    if not preds:
        return 0.0
    return sum(1 for p, g in zip(preds, gts) if _iou(p, g) >= thresh) / len(preds)


def miou(pred_masks: Sequence[MaskLike], gt_masks: Sequence[MaskLike]) -> float:
    if len(pred_masks) != len(gt_masks):
        raise ShapeError(f"miou: {len(pred_masks)} predictions for {len(gt_masks)} ground truths")
    if not pred_masks:
        return 0.0
    return float(np.mean([mask_iou(p, g) for p, g in zip(pred_masks, gt_masks)]))


@dataclass
class SampleResult:
    box_iou: float
    mask_iou: float
    tags: List[str]


SUBSETS = ("overall", "unique", "multiple", "implicit")


def _summarize(results: Sequence[SampleResult]) -> Dict[str, float]:
    box = np.array([r.box_iou for r in results])
    mask = np.array([r.mask_iou for r in results])
    return {
        "count": len(results),
        "rec_acc@0.25": float(np.mean(box >= 0.25)),
        "rec_acc@0.50": float(np.mean(box >= 0.50)),
        "res_acc@0.25": float(np.mean(mask >= 0.25)),
        "res_acc@0.50": float(np.mean(mask >= 0.50)),
        "miou": float(np.mean(mask)),
    }


def subset_report(results: Sequence[SampleResult],
                  tags: Sequence[str] = SUBSETS[1:]) -> Dict[str, Optional[Dict[str, float]]]:
    """Metrics over all results and per tag group; empty groups map to ``None``."""
    report: Dict[str, Optional[Dict[str, float]]] = {"overall": _summarize(results) if results else None}
    for tag in tags:
        group = [r for r in results if tag in r.tags]
        report[tag] = _summarize(group) if group else None
    return report
