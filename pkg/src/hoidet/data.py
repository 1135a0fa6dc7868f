"""Annotation schema, object-action vocabulary, dataset I/O, and synthetic data.

Dataset files are a single JSON document:

    {
      "vocabulary": {
        "objects": [{"name": "ball", "article": "a"}, ...],
        "actions": [{"name": "hold", "gerund": "holding",
                     "preposition": "", "null_object": false}, ...],
        "pairs": [["hold", "ball"], ["stand", null], ...]
      },
      "images": [
        {"id": "img-0", "width": 64, "height": 64,
         "pixels": [[[r, g, b], ...], ...],     # or "path": "img-0.png"
         "hois": [{"human": [x1, y1, x2, y2],
                   "object": [x1, y1, x2, y2]  # or null
                   "object_class": "ball",      # or null
                   "action_class": "hold"}, ...]},
        ...
      ]
    }

Boxes are normalized to [0, 1]. The order of "pairs" fixes the pair indexing
used everywhere (multi-hot targets, spatial statistics, semantic tables).
Actions with "null_object": true appear only in object-less pairs and
instances, so the image-level pair vector covers them uniformly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box, apply_rsc, clamp_box, iou


class DatasetError(ValueError):
    """Raised for schema violations, unknown class names, or invariant breaks."""


@dataclass(frozen=True)
class ActionClass:
    name: str
    gerund: str
    preposition: str = ""
    null_object: bool = False


@dataclass(frozen=True)
class ObjectClass:
    name: str
    article: str = "a"


class OAVocabulary:
    """Object and action classes plus the ordered list of valid (object, action) pairs.

    Pair index i refers to ``pairs[i]``; pairs of a null-object action use
    object index None. Indexing is a stable bijection onto 0..n_pairs-1.
    """

    def __init__(self, objects: list[ObjectClass], actions: list[ActionClass],
                 pairs: list[tuple[int | None, int]]):
        self.objects = list(objects)
        self.actions = list(actions)
        self.pairs = [(o, a) for o, a in pairs]
        self._object_index = {o.name: i for i, o in enumerate(objects)}
        self._action_index = {a.name: i for i, a in enumerate(actions)}
        self._pair_index = {}
        if len(self._object_index) != len(objects) or len(self._action_index) != len(actions):
            raise DatasetError("duplicate object or action names")
        for name in list(self._object_index) + list(self._action_index):
            if not name or ":" in name:
                raise DatasetError(f"class name {name!r} is empty or contains ':'")
        for k, (obj, act) in enumerate(self.pairs):
            if not 0 <= act < len(actions):
                raise DatasetError(f"pair {k}: unknown action index {act}")
            if self.actions[act].null_object:
                if obj is not None:
                    raise DatasetError(f"pair {k}: action {self.actions[act].name!r} takes no object")
            else:
                if obj is None or not 0 <= obj < len(objects):
                    raise DatasetError(f"pair {k}: bad object index {obj}")
            if (obj, act) in self._pair_index:
                raise DatasetError(f"pair {k}: duplicate pair")
            self._pair_index[(obj, act)] = k

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def object_id(self, name: str) -> int:
        try:
            return self._object_index[name]
        except KeyError:
            raise DatasetError(f"unknown object class {name!r}") from None

    def action_id(self, name: str) -> int:
        try:
            return self._action_index[name]
        except KeyError:
            raise DatasetError(f"unknown action class {name!r}") from None

    def pair_id(self, obj: int | None, act: int) -> int:
        try:
            return self._pair_index[(obj, act)]
        except KeyError:
            obj_name = None if obj is None else self.objects[obj].name
            raise DatasetError(f"({obj_name}, {self.actions[act].name}) is not a valid pair") from None

    def pair_key(self, pair: int) -> str:
        """Stable string key 'object:action' (empty object part for null pairs)."""
        obj, act = self.pairs[pair]
        return f"{'' if obj is None else self.objects[obj].name}:{self.actions[act].name}"

    def to_dict(self) -> dict:
        return {
            "objects": [{"name": o.name, "article": o.article} for o in self.objects],
            "actions": [
                {"name": a.name, "gerund": a.gerund, "preposition": a.preposition,
                 "null_object": a.null_object}
                for a in self.actions
            ],
            "pairs": [
                [self.actions[a].name, None if o is None else self.objects[o].name]
                for o, a in self.pairs
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OAVocabulary":
        try:
            objects = [ObjectClass(o["name"], o.get("article", "a")) for o in d["objects"]]
            actions = [
                ActionClass(a["name"], a["gerund"], a.get("preposition", ""),
                            bool(a.get("null_object", False)))
                for a in d["actions"]
            ]
        except (KeyError, TypeError) as e:
            raise DatasetError(f"malformed vocabulary: {e}") from None
        obj_ix = {o.name: i for i, o in enumerate(objects)}
        act_ix = {a.name: i for i, a in enumerate(actions)}
        pairs = []
        for k, entry in enumerate(d.get("pairs", [])):
            act_name, obj_name = entry
            if act_name not in act_ix:
                raise DatasetError(f"pair {k}: unknown action {act_name!r}")
            if obj_name is not None and obj_name not in obj_ix:
                raise DatasetError(f"pair {k}: unknown object {obj_name!r}")
            pairs.append((None if obj_name is None else obj_ix[obj_name], act_ix[act_name]))
        return cls(objects, actions, pairs)


@dataclass(frozen=True)
class HOIInstance:
    """One ground-truth interaction: human box, optional object box/class, action."""

    human: Box
    object: Box | None
    object_class: int | None
    action_class: int


@dataclass
class ImageAnnotation:
    image_id: str
    pixels: np.ndarray  # (H0, W0, C0) uint8
    hois: list[HOIInstance] = field(default_factory=list)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class HOIDataset:
    vocab: OAVocabulary
    images: list[ImageAnnotation]

    def __len__(self) -> int:
        return len(self.images)


def validate_instance(inst: HOIInstance, vocab: OAVocabulary, where: str = "") -> None:
    """Check one instance's class indices and the null-object invariant."""
    if not 0 <= inst.action_class < vocab.n_actions:
        raise DatasetError(f"{where}: unknown action index {inst.action_class}")
    null_action = vocab.actions[inst.action_class].null_object
    has_object = inst.object is not None
    has_class = inst.object_class is not None
    if has_object != has_class:
        raise DatasetError(f"{where}: object box and object class must be both set or both null")
    if null_action == has_object:
        raise DatasetError(
            f"{where}: action {vocab.actions[inst.action_class].name!r} "
            f"{'takes no object' if null_action else 'requires an object'}"
        )
    if has_class and not 0 <= inst.object_class < vocab.n_objects:
        raise DatasetError(f"{where}: unknown object index {inst.object_class}")
    # Every instance must map onto a declared pair.
    vocab.pair_id(inst.object_class, inst.action_class)


def _parse_box(raw, where: str) -> Box:
    try:
        x1, y1, x2, y2 = (float(v) for v in raw)
        return Box(x1, y1, x2, y2)
    except (TypeError, ValueError) as e:
        raise DatasetError(f"{where}: bad box {raw!r} ({e})") from None


def load_dataset(path: str | Path) -> HOIDataset:
    """Load and validate a dataset file. Errors carry the offending record index."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: not valid JSON ({e})") from None
    if "vocabulary" not in doc:
        raise DatasetError(f"{path}: missing 'vocabulary'")
    vocab = OAVocabulary.from_dict(doc["vocabulary"])
    images = []
    for i, rec in enumerate(doc.get("images", [])):
        where = f"images[{i}]"
        image_id = str(rec.get("id", i))
        if "pixels" in rec:
            pixels = np.asarray(rec["pixels"], dtype=np.uint8)
        elif "path" in rec:
            from PIL import Image

            pixels = np.asarray(Image.open(path.parent / rec["path"]).convert("RGB"))
        else:
            raise DatasetError(f"{where}: needs 'pixels' or 'path'")
        if pixels.ndim != 3:
            raise DatasetError(f"{where}: pixel grid must be HxWxC")
        if "width" in rec and "height" in rec:
            if (pixels.shape[1], pixels.shape[0]) != (rec["width"], rec["height"]):
                raise DatasetError(f"{where}: declared size does not match pixel grid")
        hois = []
        for j, h in enumerate(rec.get("hois", [])):
            hwhere = f"{where}.hois[{j}]"
            try:
                human = _parse_box(h.get("human"), hwhere)
                obj_raw = h.get("object")
                obj = None if obj_raw is None else _parse_box(obj_raw, hwhere)
                obj_cls_raw = h.get("object_class")
                obj_cls = None if obj_cls_raw is None else vocab.object_id(str(obj_cls_raw))
                act_cls = vocab.action_id(str(h.get("action_class")))
                inst = HOIInstance(human, obj, obj_cls, act_cls)
                validate_instance(inst, vocab, hwhere)
            except DatasetError as e:
                if hwhere not in str(e):
                    raise DatasetError(f"{hwhere}: {e}") from None
                raise
            hois.append(inst)
        images.append(ImageAnnotation(image_id, pixels, hois))
    return HOIDataset(vocab, images)


def save_dataset(dataset: HOIDataset, path: str | Path) -> None:
    """Write the JSON schema with inline pixel arrays."""
    doc = {
        "vocabulary": dataset.vocab.to_dict(),
        "images": [
            {
                "id": ann.image_id,
                "width": ann.width,
                "height": ann.height,
                "pixels": ann.pixels.tolist(),
                "hois": [
                    {
                        "human": list(inst.human.as_tuple()),
                        "object": None if inst.object is None else list(inst.object.as_tuple()),
                        "object_class": None
                        if inst.object_class is None
                        else dataset.vocab.objects[inst.object_class].name,
                        "action_class": dataset.vocab.actions[inst.action_class].name,
                    }
                    for inst in ann.hois
                ],
            }
            for ann in dataset.images
        ],
    }
    Path(path).write_text(json.dumps(doc))


def gt_oa_targets(ann: ImageAnnotation, vocab: OAVocabulary) -> np.ndarray:
    """Multi-hot vector over pair indices: 1 for every pair present in the image."""
    target = np.zeros(vocab.n_pairs, dtype=np.float64)
    for inst in ann.hois:
        target[vocab.pair_id(inst.object_class, inst.action_class)] = 1.0
    return target


def default_vocabulary() -> OAVocabulary:
    """Small built-in vocabulary: 6 objects x 5 actions, 14 valid pairs.

    'stand' and 'smile' take no object; the remaining actions cover
    6 + 5 + 1 object pairs.
    """
    objects = [
        ObjectClass("ball", "a"),
        ObjectClass("cup", "a"),
        ObjectClass("phone", "the"),
        ObjectClass("book", "a"),
        ObjectClass("pizza", "a"),
        ObjectClass("laptop", "a"),
    ]
    actions = [
        ActionClass("hold", "holding"),
        ActionClass("carry", "carrying"),
        ActionClass("eat", "eating"),
        ActionClass("stand", "standing", null_object=True),
        ActionClass("smile", "smiling", null_object=True),
    ]
    pairs: list[tuple[int | None, int]] = [(o, 0) for o in range(6)]
    pairs += [(o, 1) for o in (0, 1, 2, 3, 5)]
    pairs += [(4, 2), (None, 3), (None, 4)]
    return OAVocabulary(objects, actions, pairs)


HUMAN_COLOR = (204, 32, 32)
OBJECT_PALETTE = [
    (32, 32, 204),
    (32, 204, 32),
    (204, 204, 32),
    (32, 204, 204),
    (204, 32, 204),
    (240, 144, 32),
    (96, 96, 96),
    (160, 96, 32),
]
BACKGROUND_COLOR = (224, 224, 224)


def render_boxes(height: int, width: int, boxes: list[tuple[Box, tuple[int, int, int]]]) -> np.ndarray:
    """Paint filled rectangles (later boxes over earlier) on a flat background.

    A pixel belongs to a box iff its center lies inside it, so annotation
    boxes and painted extents agree to within one pixel.
    """
    img = np.empty((height, width, 3), dtype=np.uint8)
    img[:] = BACKGROUND_COLOR
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    for box, color in boxes:
        rows = (ys >= box.y1) & (ys <= box.y2)
        cols = (xs >= box.x1) & (xs <= box.x2)
        img[np.ix_(rows, cols)] = color
    return img


def synth_dataset(seed: int, n_images: int, vocab: OAVocabulary, layout_stats,
                  image_size: int = 64, max_instances: int = 3) -> HOIDataset:
    """Deterministic synthetic dataset: colored rectangles with exact annotations.

    Humans are painted in one fixed color, objects in a per-class color; object
    placement and person sizes are drawn from ``layout_stats`` (pair geometry
    from its Gaussians, human top-left uniform). Each image carries 1 to
    ``max_instances`` drawn interactions with actions sampled uniformly; a
    person with an object-less action additionally gets one interacting
    instance on the same human box (people stand or smile *while* holding
    things), so every image stays readable: placements are rejection-sampled
    against frame clipping and box overlap.
    """
    from .spatial import draw_pair_geometry

    rng = np.random.default_rng(seed)
    min_side = 2.0 / image_size
    by_action: dict[int, list[int]] = {}
    for p, (obj_idx, act_idx) in enumerate(vocab.pairs):
        by_action.setdefault(act_idx, []).append(p)
    actions = sorted(by_action)
    interactive = [p for p, (o, _a) in enumerate(vocab.pairs) if o is not None]

    def fits(box: Box, others: list[Box]) -> bool:
        return all(iou(box, p) < 0.1 for p in others)

    images = []
    for i in range(n_images):
        n_inst = int(rng.integers(1, max_instances + 1))
        placed: list[Box] = []
        hois = []
        for _ in range(n_inst):
            act = actions[int(rng.integers(len(actions)))]
            choices = by_action[act]
            pair = int(choices[int(rng.integers(len(choices)))])
            obj_idx, act_idx = vocab.pairs[pair]
            bonus_pair = (int(interactive[int(rng.integers(len(interactive)))])
                          if obj_idx is None else None)
            human = obj = bonus_obj = None
            for _attempt in range(40):
                (w_h, h_h), r = draw_pair_geometry(layout_stats, pair, rng)
                w_h = float(np.clip(w_h, min_side, 0.9))
                h_h = float(np.clip(h_h, min_side, 0.9))
                x = float(rng.uniform(0.0, 1.0 - w_h))
                y = float(rng.uniform(0.0, 1.0 - h_h))
                candidate = Box.from_tlwh(x, y, w_h, h_h)
                cand_obj = cand_bonus = None
                ok = True
                boxes = [candidate]
                for extra in (pair if obj_idx is not None else None, bonus_pair):
                    if extra is None:
                        continue
                    r_extra = (r if extra == pair else
                               draw_pair_geometry(layout_stats, extra, rng)[1])
                    ox1, oy1, ox2, oy2 = apply_rsc(candidate, r_extra)
                    # Reject placements whose object would be clipped by the
                    # frame: clamping would leave a sliver-thin box.
                    if ox1 < 0.0 or oy1 < 0.0 or ox2 > 1.0 or oy2 > 1.0:
                        ok = False
                        break
                    box = clamp_box(ox1, oy1, ox2, oy2, min_side=min_side)
                    if not fits(box, boxes[1:]):
                        ok = False
                        break
                    if extra == pair:
                        cand_obj = box
                    else:
                        cand_bonus = box
                    boxes.append(box)
                if ok and all(fits(b, placed) for b in boxes):
                    human, obj, bonus_obj = candidate, cand_obj, cand_bonus
                    break
            if human is None:  # crowded image: accept the last overlap
                human, obj, bonus_obj = candidate, cand_obj, cand_bonus
            placed.append(human)
            if obj_idx is None:
                hois.append(HOIInstance(human, None, None, act_idx))
                if bonus_obj is None:
                    bonus_obj = clamp_box(*apply_rsc(
                        human, draw_pair_geometry(layout_stats, bonus_pair, rng)[1]),
                        min_side=min_side)
                b_obj, b_act = vocab.pairs[bonus_pair]
                placed.append(bonus_obj)
                hois.append(HOIInstance(human, bonus_obj, b_obj, b_act))
            else:
                if obj is None:
                    obj = clamp_box(*apply_rsc(human, r), min_side=min_side)
                placed.append(obj)
                hois.append(HOIInstance(human, obj, obj_idx, act_idx))
        layers = [(inst.human, HUMAN_COLOR) for inst in hois]
        layers += [
            (inst.object, OBJECT_PALETTE[inst.object_class % len(OBJECT_PALETTE)])
            for inst in hois
            if inst.object is not None
        ]
        pixels = render_boxes(image_size, image_size, layers)
        images.append(ImageAnnotation(f"synth-{seed}-{i}", pixels, hois))
    return HOIDataset(vocab, images)
