# services/synthworld_service.py

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from errors import DataError
from models import BenchItem, BenchNegative, DatasetRecord, NegType, Scene, SceneObject, WorldSpec
from services.streams import derive_stream

logger = logging.getLogger(__name__)

RELATION_TEMPLATE = "relation"
ACTION_TEMPLATE = "action"
TEMPLATES = (RELATION_TEMPLATE, ACTION_TEMPLATE)

# (x1, y1), (x2, y2): where obj1 and obj2 sit for each relation
RELATION_POSITIONS: Dict[str, Tuple[Tuple[float, float], Tuple[float, float]]] = {
    "left_of": ((-1.0, 0.0), (1.0, 0.0)),
    "right_of": ((1.0, 0.0), (-1.0, 0.0)),
    "above": ((0.0, 1.0), (0.0, -1.0)),
    "below": ((0.0, -1.0), (0.0, 1.0)),
}
MIRROR = {"left_of": "right_of", "right_of": "left_of", "above": "below", "below": "above"}

MAX_SCENE_DRAWS = 10000


def relation_words(relation: str) -> str:
    return relation.replace("_", " ")


def _check_world(world: WorldSpec) -> None:
    unknown = [r for r in world.relations if r not in RELATION_POSITIONS]
    if unknown:
        raise DataError(f"SynthWorld: no geometry for relation(s) {unknown}")


def sample_scene(rng_stream: np.random.Generator, world: WorldSpec) -> Scene:
    """Uniform independent draws; redrawn until the two objects differ."""
    _check_world(world)
    for _ in range(MAX_SCENE_DRAWS):
        objs = []
        for _slot in range(2):
            objs.append(SceneObject(
                shape=world.shapes[int(rng_stream.integers(len(world.shapes)))],
                color=world.colors[int(rng_stream.integers(len(world.colors)))],
                size=world.sizes[int(rng_stream.integers(len(world.sizes)))],
            ))
        relation = world.relations[int(rng_stream.integers(len(world.relations)))]
        action = world.actions[int(rng_stream.integers(len(world.actions)))]
        if objs[0] != objs[1]:
            return Scene(obj1=objs[0], obj2=objs[1], relation=relation, action=action)
    raise DataError("SynthWorld: could not draw two distinct objects; world has a single object type")


def _phrase(obj: SceneObject) -> str:
    return f"the {obj.color} {obj.size} {obj.shape}"


def caption_of(scene: Scene, template_id: str) -> str:
    if template_id == RELATION_TEMPLATE:
        middle = relation_words(scene.relation)
    elif template_id == ACTION_TEMPLATE:
        middle = scene.action
    else:
        raise DataError(f"SynthWorld: unknown template {template_id!r}")
    return f"{_phrase(scene.obj1)} is {middle} {_phrase(scene.obj2)}"


def mirrored_caption(scene: Scene) -> str:
    """Relation caption with objects swapped and the relation mirrored; same meaning."""
    mirrored = Scene(obj1=scene.obj2, obj2=scene.obj1, relation=MIRROR[scene.relation], action=scene.action)
    return caption_of(mirrored, RELATION_TEMPLATE)


def _one_hot(values: List[str], value: str) -> np.ndarray:
    vec = np.zeros(len(values))
    vec[values.index(value)] = 1.0
    return vec


def render_features(scene: Scene, sigma: float, rng_stream: np.random.Generator, world: WorldSpec) -> np.ndarray:
    """
    [obj1 shape|color|size] [obj2 shape|color|size] [x1 y1 x2 y2] [action] + U(-sigma, sigma).
    The action block marks obj1 as the actor.
    """
    if sigma < 0:
        raise DataError("SynthWorld: sigma must be >= 0")
    _check_world(world)
    blocks = []
    for obj in (scene.obj1, scene.obj2):
        blocks += [_one_hot(world.shapes, obj.shape), _one_hot(world.colors, obj.color), _one_hot(world.sizes, obj.size)]
    (x1, y1), (x2, y2) = RELATION_POSITIONS[scene.relation]
    blocks.append(np.array([x1, y1, x2, y2]))
    blocks.append(_one_hot(world.actions, scene.action))
    feature = np.concatenate(blocks)
    if sigma > 0:
        feature = feature + rng_stream.uniform(-sigma, sigma, size=feature.shape)
    return feature


def decode_features(feature: np.ndarray, world: WorldSpec) -> Scene:
    """Inverse of render_features for noise below 0.5."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (world.feature_dim,):
        raise DataError(f"SynthWorld: feature shape {feature.shape} != ({world.feature_dim},)")
    cursor = 0

    def take(values: List[str]) -> str:
        nonlocal cursor
        block = feature[cursor:cursor + len(values)]
        cursor += len(values)
        return values[int(np.argmax(block))]

    objs = []
    for _slot in range(2):
        shape = take(world.shapes)
        color = take(world.colors)
        size = take(world.sizes)
        objs.append(SceneObject(shape=shape, color=color, size=size))
    coords = feature[cursor:cursor + 4]
    cursor += 4
    relation = min(
        world.relations,
        key=lambda r: float(np.sum((np.ravel(RELATION_POSITIONS[r]) - coords) ** 2)),
    )
    action = take(world.actions)
    return Scene(obj1=objs[0], obj2=objs[1], relation=relation, action=action)


@dataclass
class ParsedCaption:
    obj1: SceneObject
    obj2: SceneObject
    template: str
    predicate: str  # relation key or action verb


def parse_caption(caption: str, world: WorldSpec) -> Optional[ParsedCaption]:
    """Reads a template caption back; None for anything the templates cannot produce."""
    words = caption.split()
    if len(words) < 9 or words[0] != "the" or words[4] != "is":
        return None
    rest = words[5:]
    predicate, template = None, None
    for relation in world.relations:
        rw = relation_words(relation).split()
        if rest[:len(rw)] == rw:
            predicate, template, rest = relation, RELATION_TEMPLATE, rest[len(rw):]
            break
    if predicate is None and rest[0] in world.actions:
        predicate, template, rest = rest[0], ACTION_TEMPLATE, rest[1:]
    if predicate is None or len(rest) != 4 or rest[0] != "the":
        return None
    return ParsedCaption(
        obj1=SceneObject(color=words[1], size=words[2], shape=words[3]),
        obj2=SceneObject(color=rest[1], size=rest[2], shape=rest[3]),
        template=template,
        predicate=predicate,
    )


def caption_holds(scene: Scene, caption: str, world: WorldSpec) -> bool:
    """True if the caption describes the scene, accepting the mirrored relation form."""
    parsed = parse_caption(caption, world)
    if parsed is None:
        return False
    if parsed.template == ACTION_TEMPLATE:
        return parsed.obj1 == scene.obj1 and parsed.obj2 == scene.obj2 and parsed.predicate == scene.action
    direct = parsed.obj1 == scene.obj1 and parsed.obj2 == scene.obj2 and parsed.predicate == scene.relation
    mirrored = parsed.obj1 == scene.obj2 and parsed.obj2 == scene.obj1 and parsed.predicate == MIRROR[scene.relation]
    return direct or mirrored


def contradicted_component(scene: Scene, caption: str, template: str, world: WorldSpec) -> Optional[NegType]:
    """Which single component a negative caption gets wrong, or None if zero or several."""
    parsed = parse_caption(caption, world)
    if parsed is None or parsed.template != template:
        return None
    predicate = scene.relation if template == RELATION_TEMPLATE else scene.action
    if parsed.obj1 == scene.obj2 and parsed.obj2 == scene.obj1 and parsed.predicate == predicate:
        return NegType.REL
    if parsed.predicate != predicate:
        same_objects = parsed.obj1 == scene.obj1 and parsed.obj2 == scene.obj2
        return NegType.ACT if same_objects and template == ACTION_TEMPLATE else None
    diffs = []
    for got, want in ((parsed.obj1, scene.obj1), (parsed.obj2, scene.obj2)):
        if got.shape != want.shape:
            diffs.append(NegType.OBJ)
        if got.color != want.color or got.size != want.size:
            diffs.append(NegType.ATT)
    return diffs[0] if len(diffs) == 1 else None


def _swap_value(values: List[str], current: str, rng_stream: np.random.Generator) -> Optional[str]:
    others = [v for v in values if v != current]
    if not others:
        return None
    return others[int(rng_stream.integers(len(others)))]


def typed_negatives(scene: Scene, template: str, world: WorldSpec, rng_stream: np.random.Generator) -> List[BenchNegative]:
    """Ground-truth negatives, each false of the scene in exactly one component."""
    negatives: List[BenchNegative] = []
    positive = caption_of(scene, template)

    swapped = scene.model_copy(update={"obj1": scene.obj2, "obj2": scene.obj1})
    rel_caption = caption_of(swapped, template)
    if rel_caption != positive:
        negatives.append(BenchNegative(caption=rel_caption, type=NegType.REL))

    slot = int(rng_stream.integers(2))
    attribute = "color" if int(rng_stream.integers(2)) == 0 else "size"
    target = scene.obj1 if slot == 0 else scene.obj2
    pool = world.colors if attribute == "color" else world.sizes
    new_value = _swap_value(pool, getattr(target, attribute), rng_stream)
    if new_value is None:
        attribute = "size" if attribute == "color" else "color"
        pool = world.colors if attribute == "color" else world.sizes
        new_value = _swap_value(pool, getattr(target, attribute), rng_stream)
    if new_value is not None:
        changed = target.model_copy(update={attribute: new_value})
        att_scene = scene.model_copy(update={"obj1" if slot == 0 else "obj2": changed})
        negatives.append(BenchNegative(caption=caption_of(att_scene, template), type=NegType.ATT))

    if template == ACTION_TEMPLATE:
        new_action = _swap_value(world.actions, scene.action, rng_stream)
        if new_action is not None:
            negatives.append(BenchNegative(caption=caption_of(scene.model_copy(update={"action": new_action}), template), type=NegType.ACT))

    slot = int(rng_stream.integers(2))
    target = scene.obj1 if slot == 0 else scene.obj2
    new_shape = _swap_value(world.shapes, target.shape, rng_stream)
    if new_shape is not None:
        changed = target.model_copy(update={"shape": new_shape})
        obj_scene = scene.model_copy(update={"obj1" if slot == 0 else "obj2": changed})
        negatives.append(BenchNegative(caption=caption_of(obj_scene, template), type=NegType.OBJ))
    return negatives


@dataclass
class SynthDataset:
    train: List[DatasetRecord] = field(default_factory=list)
    eval_items: List[BenchItem] = field(default_factory=list)
    train_scene_keys: Set[str] = field(default_factory=set)
    eval_scene_keys: Set[str] = field(default_factory=set)


def scene_identity(scene: Scene) -> str:
    """Split key shared by a scene and its mirror (objects swapped, relation mirrored)."""
    mirror = Scene(obj1=scene.obj2, obj2=scene.obj1, relation=MIRROR[scene.relation], action=scene.action)
    return min(scene.key(), mirror.key())


def _max_scenes(world: WorldSpec) -> int:
    objects = len(world.shapes) * len(world.colors) * len(world.sizes)
    ordered = objects * (objects - 1) * len(world.actions)
    total = 0
    for relation in world.relations:
        # a relation whose mirror is also in the world shares its identities with it
        total += ordered // 2 if MIRROR[relation] in world.relations else ordered
    return total


def make_dataset(world: WorldSpec, n: int, sigma: float, seed: int) -> SynthDataset:
    """
    n distinct scenes, split by scene identity. Relation-template scenes give two
    training records (canonical and mirrored caption) sharing one feature.
    """
    if n < 1:
        raise DataError("SynthWorld: n must be >= 1")
    if n > _max_scenes(world):
        raise DataError(f"SynthWorld: world has only {_max_scenes(world)} distinct scenes, asked for {n}")

    drawn = []  # (index, scene, template, feature, stream)
    seen: Set[str] = set()
    for idx in range(n):
        stream = derive_stream(seed, 0, idx)
        scene = sample_scene(stream, world)
        while scene_identity(scene) in seen:
            scene = sample_scene(stream, world)
        seen.add(scene_identity(scene))
        template = TEMPLATES[int(stream.integers(len(TEMPLATES)))]
        feature = render_features(scene, sigma, stream, world)
        drawn.append((idx, scene, template, feature, stream))

    order = derive_stream(seed, 1).permutation(n)
    n_eval = int(round(n * world.eval_fraction))
    eval_indices = set(int(i) for i in order[:n_eval])

    dataset = SynthDataset()
    for idx, scene, template, feature, stream in drawn:
        scene_id = f"s{idx:05d}"
        feature_list = feature.tolist()
        if idx in eval_indices:
            dataset.eval_scene_keys.add(scene_identity(scene))
            dataset.eval_items.append(BenchItem(
                id=scene_id,
                feature=feature_list,
                positive=caption_of(scene, template),
                negatives=typed_negatives(scene, template, world, stream),
            ))
            continue
        dataset.train_scene_keys.add(scene_identity(scene))
        dataset.train.append(DatasetRecord(
            id=f"{scene_id}-a", feature=feature_list, caption=caption_of(scene, template),
            scene=scene, scene_id=scene_id, template=template,
        ))
        if template == RELATION_TEMPLATE:
            dataset.train.append(DatasetRecord(
                id=f"{scene_id}-b", feature=feature_list, caption=mirrored_caption(scene),
                scene=scene, scene_id=scene_id, template=template,
            ))
    logger.info(
        f"SynthWorld: {n} scenes -> {len(dataset.train)} train records, {len(dataset.eval_items)} eval items (seed {seed}, sigma {sigma})."
    )
    return dataset
