"""Scene-graph-driven QA generation for city scenes at three viewing scales.

Scenes arrive as JSONL annotations (objects with class, centroid, extents,
optional color/pose/functionality attributes, plus an observer pose). A
spatial graph is built from pairwise geometry: near / far-from by centroid
distance with per-tier thresholds, and left-of / right-of / in-front-of /
behind from the displacement expressed in the observer frame, with an
angular dead zone around each axis. Four template families instantiate QA
pairs from the graph, each pair carrying the exact facts used so answers
stay re-derivable. Generation is fully deterministic; a remote paraphrase
client can optionally rewrite question surfaces (best effort, never the
answer).
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import requests

from .seeding import derive_rng

logger = logging.getLogger("cityqa.svmgen")

TIERS = ("terrestrial", "low-altitude", "high-altitude")
MODALITY_NAMES = ("image", "point")
TIER_CLASSES = {
    "terrestrial": ("building", "car", "road", "tree", "pedestrian"),
    "low-altitude": ("building", "road", "tree", "car", "park"),
    "high-altitude": ("building", "road", "forest", "lake", "field"),
}
COLORS = ("blue", "yellow", "green", "red", "black", "white")
POSES = ("moving", "standing", "parked")
FUNCTIONALITIES = (
    "residential area",
    "shopping area",
    "art exhibition",
    "parking lot",
    "train station",
    "school",
)
ATTRIBUTE_VOCABS = {"color": COLORS, "pose": POSES, "functionality": FUNCTIONALITIES}

RELATIONS = ("left-of", "right-of", "in-front-of", "behind", "near", "far-from")
SYMMETRIC_RELATIONS = ("near", "far-from")
CONVERSE = {
    "left-of": "right-of",
    "right-of": "left-of",
    "in-front-of": "behind",
    "behind": "in-front-of",
}
RELATION_SURFACE = {
    "near": "near",
    "far-from": "far from",
    "left-of": "left of",
    "right-of": "right of",
    "in-front-of": "in front of",
    "behind": "behind",
}

QTYPES = ("Localization", "Measurement", "Functionality", "Logicality")
TIE_MARGIN = 1e-6

CITIES = (
    "boston", "birmingham", "cambridge", "nanjing", "portland",
    "qingdao", "shenzhen", "singapore", "wuhan", "wuxi",
)


class SceneFormatError(ValueError):
    """Scene input violates the documented schema or its closed vocabularies."""


# -- scene schema --------------------------------------------------------------


@dataclass
class ObjectAnno:
    id: str
    cls: str
    centroid: tuple  # (x, y, z) meters
    extents: tuple  # (dx, dy, dz) meters
    attributes: dict = field(default_factory=dict)


@dataclass
class ObserverPose:
    position: tuple  # (x, y, z)
    facing_deg: float  # 0 = +x axis, counter-clockwise

    @property
    def facing(self) -> tuple:
        rad = math.radians(self.facing_deg)
        return (math.cos(rad), math.sin(rad))


@dataclass
class SceneAnnotation:
    scene_id: str
    city: str
    tier: str
    modalities: tuple
    observer: ObserverPose
    objects: list

    @property
    def modality_tag(self) -> str:
        has_image = "image" in self.modalities
        has_point = "point" in self.modalities
        if has_image and has_point:
            return "point-image"
        return "image" if has_image else "point"


def _require(cond: bool, where: str, message: str) -> None:
    if not cond:
        raise SceneFormatError(f"{where}: {message}")


def _vec3(value, where: str, name: str) -> tuple:
    _require(isinstance(value, (list, tuple)) and len(value) == 3, where,
             f"{name} must be a 3-vector")
    out = tuple(float(v) for v in value)
    _require(all(math.isfinite(v) for v in out), where, f"{name} has non-finite entries")
    return out


def scene_from_dict(d: dict, where: str = "scene") -> SceneAnnotation:
    """Validate one scene record; every violation names the offending field."""
    for key in ("scene_id", "city", "tier", "modalities", "observer", "objects"):
        _require(key in d, where, f"missing field {key!r}")
    scene_id = str(d["scene_id"])
    where = f"{where} {scene_id!r}"
    _require(d["tier"] in TIERS, where,
             f"unknown tier {d['tier']!r}; allowed: {', '.join(TIERS)}")
    mods = d["modalities"]
    _require(isinstance(mods, (list, tuple)) and len(mods) >= 1, where,
             "modalities must be a non-empty list")
    for m in mods:
        _require(m in MODALITY_NAMES, where,
                 f"unknown modality {m!r}; allowed: {', '.join(MODALITY_NAMES)}")
    obs = d["observer"]
    _require(isinstance(obs, dict) and "position" in obs and "facing_deg" in obs,
             where, "observer needs position and facing_deg")
    observer = ObserverPose(
        position=_vec3(obs["position"], where, "observer.position"),
        facing_deg=float(obs["facing_deg"]),
    )
    _require(math.isfinite(observer.facing_deg), where, "observer.facing_deg not finite")
    raw_objects = d["objects"]
    _require(isinstance(raw_objects, list) and len(raw_objects) >= 1, where,
             "scene needs at least one object")
    allowed_classes = TIER_CLASSES[d["tier"]]
    objects = []
    seen_ids = set()
    for i, od in enumerate(raw_objects):
        owhere = f"{where} object[{i}]"
        for key in ("id", "class", "centroid", "extents"):
            _require(key in od, owhere, f"missing field {key!r}")
        oid = str(od["id"])
        _require(oid not in seen_ids, owhere, f"duplicate object id {oid!r}")
        seen_ids.add(oid)
        _require(od["class"] in allowed_classes, owhere,
                 f"unknown class {od['class']!r} for tier {d['tier']!r}; "
                 f"allowed: {', '.join(allowed_classes)}")
        extents = _vec3(od["extents"], owhere, "extents")
        _require(all(e >= 0 for e in extents), owhere, "extents must be >= 0")
        attrs = od.get("attributes", {})
        _require(isinstance(attrs, dict), owhere, "attributes must be a mapping")
        for akey, avalue in attrs.items():
            _require(akey in ATTRIBUTE_VOCABS, owhere,
                     f"unknown attribute {akey!r}; allowed: "
                     f"{', '.join(ATTRIBUTE_VOCABS)}")
            vocab = ATTRIBUTE_VOCABS[akey]
            _require(avalue in vocab, owhere,
                     f"unknown {akey} value {avalue!r}; allowed: {', '.join(vocab)}")
        objects.append(ObjectAnno(
            id=oid,
            cls=od["class"],
            centroid=_vec3(od["centroid"], owhere, "centroid"),
            extents=extents,
            attributes=dict(attrs),
        ))
    return SceneAnnotation(
        scene_id=scene_id,
        city=str(d["city"]),
        tier=d["tier"],
        modalities=tuple(mods),
        observer=observer,
        objects=objects,
    )


def scene_to_dict(scene: SceneAnnotation) -> dict:
    return {
        "scene_id": scene.scene_id,
        "city": scene.city,
        "tier": scene.tier,
        "modalities": list(scene.modalities),
        "observer": {
            "position": list(scene.observer.position),
            "facing_deg": scene.observer.facing_deg,
        },
        "objects": [
            {
                "id": o.id,
                "class": o.cls,
                "centroid": list(o.centroid),
                "extents": list(o.extents),
                "attributes": dict(o.attributes),
            }
            for o in scene.objects
        ],
    }


def load_scenes(path) -> list:
    """Read one scene per JSONL line, validating ids, vocabularies, geometry."""
    scenes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SceneFormatError(f"{path} line {lineno}: invalid JSON: {exc}") from exc
            scenes.append(scene_from_dict(record, where=f"{path} line {lineno}"))
    seen = set()
    for scene in scenes:
        _require(scene.scene_id not in seen, str(path),
                 f"duplicate scene_id {scene.scene_id!r}")
        seen.add(scene.scene_id)
    return scenes


def save_scenes(scenes: list, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene_to_dict(scene)) + "\n")


# -- scene graph ---------------------------------------------------------------


@dataclass
class RelationConfig:
    """Distance thresholds per tier and the angular dead zone, all in config."""

    near_thresholds: dict = field(default_factory=lambda: {
        "terrestrial": 10.0, "low-altitude": 50.0, "high-altitude": 500.0,
    })
    far_factor: float = 5.0
    dead_zone_deg: float = 15.0

    def near_threshold(self, tier: str) -> float:
        return self.near_thresholds[tier]

    def far_threshold(self, tier: str) -> float:
        return self.far_factor * self.near_thresholds[tier]


@dataclass
class SceneGraph:
    scene: SceneAnnotation
    edges: list  # (subject_id, relation, object_id)

    def objects_by_id(self) -> dict:
        return {o.id: o for o in self.scene.objects}

    def related(self, subject_id: str, relation: str) -> list:
        """Object ids related to subject; symmetric relations query both ways."""
        out = [o for s, r, o in self.edges if s == subject_id and r == relation]
        if relation in SYMMETRIC_RELATIONS:
            out += [s for s, r, o in self.edges if o == subject_id and r == relation]
        return sorted(set(out))


def _frame_axes(observer: ObserverPose) -> tuple:
    f = observer.facing
    right = (f[1], -f[0])
    return f, right


def _distance(a: tuple, b: tuple) -> float:
    return math.dist(a, b)


def build_scene_graph(scene: SceneAnnotation,
                      cfg: Optional[RelationConfig] = None) -> SceneGraph:
    """All-pairs relations from raw geometry; deterministic edge order.

    near/far edges are stored once with the lexically smaller id as subject;
    directional edges are stored in both directions. A pair whose
    displacement sits within dead_zone_deg of the facing axis gets no
    lateral edge, and within dead_zone_deg of the lateral axis no
    longitudinal edge.
    """
    cfg = cfg or RelationConfig()
    near_t = cfg.near_threshold(scene.tier)
    far_t = cfg.far_threshold(scene.tier)
    forward, right = _frame_axes(scene.observer)
    edges = []
    objs = sorted(scene.objects, key=lambda o: o.id)
    for i, a in enumerate(objs):
        for b in objs[i + 1:]:
            dist = _distance(a.centroid, b.centroid)
            if dist < near_t:
                edges.append((a.id, "near", b.id))
            elif dist > far_t:
                edges.append((a.id, "far-from", b.id))
            dx = a.centroid[0] - b.centroid[0]
            dy = a.centroid[1] - b.centroid[1]
            d_long = dx * forward[0] + dy * forward[1]
            d_lat = dx * right[0] + dy * right[1]
            if d_lat == 0.0 and d_long == 0.0:
                continue
            alpha = math.degrees(math.atan2(abs(d_lat), abs(d_long)))
            if alpha >= cfg.dead_zone_deg:
                rel = "right-of" if d_lat > 0 else "left-of"
                edges.append((a.id, rel, b.id))
                edges.append((b.id, CONVERSE[rel], a.id))
            if alpha <= 90.0 - cfg.dead_zone_deg:
                rel = "in-front-of" if d_long > 0 else "behind"
                edges.append((a.id, rel, b.id))
                edges.append((b.id, CONVERSE[rel], a.id))
    edges.sort()
    return SceneGraph(scene=scene, edges=edges)


def observer_direction(scene: SceneAnnotation, obj: ObjectAnno) -> str:
    """Quadrant of the object in the observer frame: ahead/right/behind/left."""
    forward, right = _frame_axes(scene.observer)
    qx = obj.centroid[0] - scene.observer.position[0]
    qy = obj.centroid[1] - scene.observer.position[1]
    lat = qx * right[0] + qy * right[1]
    lon = qx * forward[0] + qy * forward[1]
    theta = math.degrees(math.atan2(lat, lon))
    if abs(theta) <= 45.0:
        return "ahead"
    if abs(theta) >= 135.0:
        return "behind"
    return "right" if theta > 0 else "left"


# -- QA pairs ------------------------------------------------------------------


@dataclass
class QAPair:
    id: str
    scene_id: str
    question: str
    answer: str
    qtype: str
    hops: int
    modality: str
    provenance: list  # list of [subject, predicate, value] fact triples

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "scene_id": self.scene_id,
            "question": self.question,
            "answer": self.answer,
            "qtype": self.qtype,
            "hops": self.hops,
            "modality": self.modality,
            "provenance": [list(f) for f in self.provenance],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QAPair":
        missing = [k for k in ("id", "scene_id", "question", "answer", "qtype",
                               "hops", "modality", "provenance") if k not in d]
        if missing:
            raise ValueError(f"corpus record missing fields: {', '.join(missing)}")
        return cls(
            id=d["id"], scene_id=d["scene_id"], question=d["question"],
            answer=d["answer"], qtype=d["qtype"], hops=int(d["hops"]),
            modality=d["modality"],
            provenance=[tuple(f) for f in d["provenance"]],
        )


def plural(cls: str) -> str:
    return cls + "s"


def mentions(scene: SceneAnnotation) -> dict:
    """Unambiguous noun phrase per resolvable object.

    The sole instance of a class is "the <class>"; same-class instances with
    pairwise-distinct colors become "the <color> <class>"; anything else has
    no mention and is skipped by the templates.
    """
    by_class: dict[str, list[ObjectAnno]] = {}
    for o in scene.objects:
        by_class.setdefault(o.cls, []).append(o)
    out = {}
    for cls, group in by_class.items():
        if len(group) == 1:
            out[group[0].id] = f"the {cls}"
            continue
        colors = [o.attributes.get("color") for o in group]
        if all(colors) and len(set(colors)) == len(colors):
            for o, color in zip(group, colors):
                out[o.id] = f"the {color} {cls}"
    return out


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def gen_localization(graph: SceneGraph) -> list:
    """"Where is the <mention>?" answered by one relation to a landmark."""
    scene = graph.scene
    name = mentions(scene)
    objs = graph.objects_by_id()
    priority = ("near", "in-front-of", "behind", "left-of", "right-of", "far-from")
    pairs = []
    for oid in sorted(name):
        landmark = None
        rel_used = None
        for rel in priority:
            candidates = [c for c in graph.related(oid, rel) if c != oid and c in name]
            if candidates:
                landmark = candidates[0]
                rel_used = rel
                break
        if landmark is None:
            continue
        target_phrase = name[oid]
        question = f"Where is {target_phrase}?"
        answer = f"{RELATION_SURFACE[rel_used]} {name[landmark]}"
        pairs.append(QAPair(
            id=f"{scene.scene_id}-loc-{len(pairs)}",
            scene_id=scene.scene_id,
            question=question,
            answer=answer,
            qtype="Localization",
            hops=1,
            modality=scene.modality_tag,
            provenance=[(oid, rel_used, landmark)],
        ))
    return pairs


def gen_measurement(graph: SceneGraph) -> list:
    """Counting per tier-vocabulary class, plus taller-of-two comparisons."""
    scene = graph.scene
    pairs = []
    counts: dict[str, int] = {}
    for o in scene.objects:
        counts[o.cls] = counts.get(o.cls, 0) + 1
    for cls in TIER_CLASSES[scene.tier]:
        n = counts.get(cls, 0)
        pairs.append(QAPair(
            id=f"{scene.scene_id}-meas-{len(pairs)}",
            scene_id=scene.scene_id,
            question=f"How many {plural(cls)} are in this city?",
            answer=str(n),
            qtype="Measurement",
            hops=1,
            modality=scene.modality_tag,
            provenance=[(cls, "count", str(n))],
        ))
    # height comparisons between sole-instance classes only
    uniques = [o for o in sorted(scene.objects, key=lambda o: o.id)
               if sum(x.cls == o.cls for x in scene.objects) == 1]
    for i, a in enumerate(uniques):
        for b in uniques[i + 1:]:
            ha, hb = a.extents[2], b.extents[2]
            if abs(ha - hb) <= TIE_MARGIN:
                continue
            winner = a if ha > hb else b
            pairs.append(QAPair(
                id=f"{scene.scene_id}-meas-{len(pairs)}",
                scene_id=scene.scene_id,
                question=f"Which is taller, the {a.cls} or the {b.cls}?",
                answer=f"the {winner.cls}",
                qtype="Measurement",
                hops=2,
                modality=scene.modality_tag,
                provenance=[(a.id, "height", _fmt(ha)), (b.id, "height", _fmt(hb))],
            ))
    return pairs


def gen_functionality(graph: SceneGraph) -> list:
    """Purpose questions from the functionality attribute, plus directions."""
    scene = graph.scene
    name = mentions(scene)
    pairs = []
    for o in sorted(scene.objects, key=lambda o: o.id):
        func = o.attributes.get("functionality")
        if not func or o.id not in name:
            continue
        phrase = name[o.id]
        if phrase == f"the {o.cls}":
            question = f"What is this {o.cls} used for?"
        else:
            question = f"What is {phrase} used for?"
        pairs.append(QAPair(
            id=f"{scene.scene_id}-func-{len(pairs)}",
            scene_id=scene.scene_id,
            question=question,
            answer=func,
            qtype="Functionality",
            hops=1,
            modality=scene.modality_tag,
            provenance=[(o.id, "functionality", func)],
        ))
    holders: dict[str, list[ObjectAnno]] = {}
    for o in scene.objects:
        func = o.attributes.get("functionality")
        if func:
            holders.setdefault(func, []).append(o)
    for func in sorted(holders):
        group = holders[func]
        if len(group) != 1:
            continue
        direction = observer_direction(scene, group[0])
        pairs.append(QAPair(
            id=f"{scene.scene_id}-func-{len(pairs)}",
            scene_id=scene.scene_id,
            question=f"Which direction should I take to reach the {func}?",
            answer=direction,
            qtype="Functionality",
            hops=1,
            modality=scene.modality_tag,
            provenance=[(group[0].id, "observer-direction", direction)],
        ))
    return pairs


def gen_logicality(graph: SceneGraph) -> list:
    """Two-fact comparisons: closer-of-two, and nearest-to-a-qualified-object."""
    scene = graph.scene
    obs = scene.observer.position
    objs = graph.objects_by_id()
    pairs = []
    by_class: dict[str, list[ObjectAnno]] = {}
    for o in sorted(scene.objects, key=lambda o: o.id):
        by_class.setdefault(o.cls, []).append(o)

    for cls in sorted(by_class):
        group = by_class[cls]
        if len(group) != 2:
            continue
        a, b = group
        ca, cb = a.attributes.get("color"), b.attributes.get("color")
        if not ca or not cb or ca == cb:
            continue
        da, db = _distance(obs, a.centroid), _distance(obs, b.centroid)
        if abs(da - db) <= TIE_MARGIN:
            continue
        winner_color = ca if da < db else cb
        pairs.append(QAPair(
            id=f"{scene.scene_id}-logi-{len(pairs)}",
            scene_id=scene.scene_id,
            question=(f"Which {cls} is closer to me, "
                      f"the {ca} one or the {cb} one?"),
            answer=f"the {winner_color} one",
            qtype="Logicality",
            hops=2,
            modality=scene.modality_tag,
            provenance=[
                (a.id, "distance-to-observer", _fmt(da)),
                (b.id, "distance-to-observer", _fmt(db)),
            ],
        ))

    # chained: "Which <t> is nearest to the <cx> that is <rel> the <cr>?"
    unique_classes = {cls for cls, group in by_class.items() if len(group) == 1}
    oriented = []
    for sub, rel, obj in graph.edges:
        oriented.append((sub, rel, obj))
        if rel in SYMMETRIC_RELATIONS:
            oriented.append((obj, rel, sub))
    for sub, rel, obj in oriented:
        x, r = objs[sub], objs[obj]
        if r.cls not in unique_classes or len(by_class[x.cls]) < 2:
            continue
        qualified = [o for o in by_class[x.cls]
                     if obj in graph.related(o.id, rel)]
        if len(qualified) != 1 or qualified[0].id != x.id:
            continue
        for tcls in sorted(by_class):
            if tcls in (x.cls, r.cls):
                continue
            group = by_class[tcls]
            if len(group) < 2:
                continue
            colors = [o.attributes.get("color") for o in group]
            if not all(colors) or len(set(colors)) != len(colors):
                continue
            dists = sorted(
                (_distance(x.centroid, o.centroid), o) for o in group
            )
            if dists[1][0] - dists[0][0] <= TIE_MARGIN:
                continue
            winner = dists[0][1]
            pairs.append(QAPair(
                id=f"{scene.scene_id}-logi-{len(pairs)}",
                scene_id=scene.scene_id,
                question=(f"Which {tcls} is nearest to the {x.cls} "
                          f"that is {RELATION_SURFACE[rel]} the {r.cls}?"),
                answer=f"the {winner.attributes['color']} one",
                qtype="Logicality",
                hops=2,
                modality=scene.modality_tag,
                provenance=[
                    (x.id, rel, r.id),
                    (winner.id, f"nearest-{tcls}-to", x.id),
                ],
            ))
    return pairs


def generate_pairs(scene: SceneAnnotation,
                   cfg: Optional[RelationConfig] = None) -> list:
    graph = build_scene_graph(scene, cfg)
    return (gen_localization(graph) + gen_measurement(graph)
            + gen_functionality(graph) + gen_logicality(graph))


def generate_corpus(scenes: list, cfg: Optional[RelationConfig] = None,
                    client: Optional["RemoteLLMClient"] = None) -> list:
    pairs = []
    for scene in scenes:
        scene_pairs = generate_pairs(scene, cfg)
        if client is not None:
            scene_pairs = [paraphrase(p, client) for p in scene_pairs]
        pairs.extend(scene_pairs)
    pairs.sort(key=lambda p: (p.scene_id, p.id))
    return pairs


# -- remote paraphrase (best effort) --------------------------------------------


@dataclass
class RemoteLLMClient:
    """Single-POST text endpoint: {"prompt": ...} in, {"text": ...} out."""

    endpoint: Optional[str] = None
    api_key_env: str = "PARAPHRASE_API_KEY"
    timeout: float = 30.0
    max_retries: int = 2

    @property
    def enabled(self) -> bool:
        return bool(self.endpoint)

    def rewrite(self, text: str) -> Optional[str]:
        """Rewritten text, or None after exhausting retries."""
        if not self.enabled:
            return None
        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        prompt = (
            "Rewrite the following question so it reads naturally, without "
            f"changing its meaning. Reply with the question only.\n{text}"
        )
        for attempt in range(self.max_retries + 1):
            try:
                resp = requests.post(
                    self.endpoint, json={"prompt": prompt},
                    headers=headers, timeout=self.timeout,
                )
                resp.raise_for_status()
                rewritten = resp.json().get("text", "").strip()
                if rewritten:
                    return rewritten
                logger.warning("paraphrase attempt %d returned empty text", attempt + 1)
            except (requests.RequestException, ValueError) as exc:
                logger.warning("paraphrase attempt %d failed: %s", attempt + 1, exc)
        return None


def paraphrase(pair: QAPair, client: Optional[RemoteLLMClient]) -> QAPair:
    """Rewrite the question surface remotely; never touches any other field.

    Any failure (disabled client, timeout, bad payload) returns the original
    pair with a logged warning.
    """
    if client is None or not client.enabled:
        return pair
    rewritten = client.rewrite(pair.question)
    if rewritten is None:
        logger.warning("paraphrase failed for %s; keeping template surface", pair.id)
        return pair
    return QAPair(
        id=pair.id, scene_id=pair.scene_id, question=rewritten,
        answer=pair.answer, qtype=pair.qtype, hops=pair.hops,
        modality=pair.modality, provenance=list(pair.provenance),
    )


# -- corpus IO -------------------------------------------------------------------


def emit_corpus(pairs: list, path) -> None:
    """One JSON record per line, stable field order, sorted by (scene_id, id)."""
    ordered = sorted(pairs, key=lambda p: (p.scene_id, p.id))
    with open(path, "w", encoding="utf-8") as fh:
        for pair in ordered:
            fh.write(json.dumps(pair.to_dict()) + "\n")


def load_corpus(path) -> list:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                pairs.append(QAPair.from_dict(json.loads(line)))
            except (json.JSONDecodeError, ValueError) as exc:
                raise ValueError(f"{path} line {lineno}: {exc}") from exc
    return pairs


def corpus_summary(pairs: list) -> dict:
    """Pair counts split by question type and by modality tag."""
    by_qtype = {q: 0 for q in QTYPES}
    by_modality = {"point": 0, "image": 0, "point-image": 0}
    by_hops = {1: 0, 2: 0}
    for p in pairs:
        by_qtype[p.qtype] = by_qtype.get(p.qtype, 0) + 1
        by_modality[p.modality] = by_modality.get(p.modality, 0) + 1
        by_hops[p.hops] = by_hops.get(p.hops, 0) + 1
    return {
        "pairs": len(pairs),
        "by_qtype": by_qtype,
        "by_modality": by_modality,
        "by_hops": {str(k): v for k, v in by_hops.items()},
    }


# -- synthetic scene authoring ----------------------------------------------------


_HEIGHT_RANGES = {
    "building": (8.0, 60.0), "car": (1.3, 2.0), "road": (0.05, 0.3),
    "tree": (2.0, 12.0), "pedestrian": (1.5, 1.9), "park": (0.5, 3.0),
    "forest": (5.0, 25.0), "lake": (0.1, 0.5), "field": (0.1, 0.5),
}
_TIER_RADIUS = {"terrestrial": 40.0, "low-altitude": 200.0, "high-altitude": 2000.0}


def random_scenes(n: int, seed: int = 0, tier: Optional[str] = None) -> list:
    """Seeded synthetic scene annotations rich enough to hit every template.

    Each scene gets one duplicated class with two distinctly colored
    instances, at least one functionality-tagged object, and twice that many
    filler objects, spread over a tier-scaled disc around the observer.
    """
    rng = derive_rng("random-scenes", seed)
    scenes = []
    for i in range(n):
        scene_tier = tier or TIERS[int(rng.integers(len(TIERS)))]
        classes = TIER_CLASSES[scene_tier]
        radius = _TIER_RADIUS[scene_tier]
        objects = []
        obj_seq = 0

        def add_object(cls: str, attrs: dict) -> ObjectAnno:
            nonlocal obj_seq
            r = radius * math.sqrt(rng.uniform(0.02, 1.0))
            ang = rng.uniform(0.0, 2.0 * math.pi)
            lo, hi = _HEIGHT_RANGES[cls]
            height = rng.uniform(lo, hi)
            footprint = max(0.5, height * rng.uniform(0.3, 1.5))
            obj = ObjectAnno(
                id=f"{cls}_{obj_seq}",
                cls=cls,
                centroid=(r * math.cos(ang), r * math.sin(ang), height / 2.0),
                extents=(footprint, footprint * rng.uniform(0.6, 1.4), height),
                attributes=attrs,
            )
            obj_seq += 1
            objects.append(obj)
            return obj

        # duplicated class with two distinct colors (drives Logicality)
        dup_cls = classes[int(rng.integers(len(classes)))]
        color_a, color_b = rng.choice(len(COLORS), size=2, replace=False)
        add_object(dup_cls, {"color": COLORS[color_a]})
        add_object(dup_cls, {"color": COLORS[color_b]})

        # functionality holders (buildings when available)
        func_cls = "building" if "building" in classes else classes[0]
        func_values = rng.choice(len(FUNCTIONALITIES),
                                 size=int(rng.integers(1, 3)), replace=False)
        for fv in func_values:
            attrs = {"functionality": FUNCTIONALITIES[fv]}
            if rng.random() < 0.5:
                attrs["color"] = COLORS[int(rng.integers(len(COLORS)))]
            add_object(func_cls, attrs)

        # fillers from the remaining classes, singletons for clean mentions
        fillers = [c for c in classes if c not in (dup_cls, func_cls)]
        n_fill = int(rng.integers(2, len(fillers) + 1))
        for ci in rng.choice(len(fillers), size=n_fill, replace=False):
            cls = fillers[ci]
            attrs = {}
            if rng.random() < 0.4:
                attrs["color"] = COLORS[int(rng.integers(len(COLORS)))]
            if cls in ("car", "pedestrian") and rng.random() < 0.5:
                attrs["pose"] = POSES[int(rng.integers(len(POSES)))]
            add_object(cls, attrs)

        scenes.append(SceneAnnotation(
            scene_id=f"scene-{seed:04d}-{i:03d}",
            city=CITIES[int(rng.integers(len(CITIES)))],
            tier=scene_tier,
            modalities=(("image",), ("point",), ("image", "point"))[
                int(rng.integers(3))
            ],
            observer=ObserverPose(
                position=(rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0), 1.7),
                facing_deg=float(rng.uniform(0.0, 360.0)),
            ),
            objects=objects,
        ))
    return scenes
