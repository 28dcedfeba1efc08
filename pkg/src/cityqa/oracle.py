"""Brute-force re-derivation of QA answers from raw scene geometry.

This is the check on the generator, so it goes out of its way not to share
code with it: no SceneGraph is built, relations are decided with tangent
comparisons instead of angle arithmetic, directions with component
comparisons instead of atan2 quadrants, and noun phrases are rebuilt from a
fresh scan of the annotations. Shared inputs are limited to the relation
thresholds (configuration) and the surface-form lookup tables.
"""

from __future__ import annotations

import math
from typing import Optional

from .svmgen import (
    RELATION_SURFACE,
    RelationConfig,
    ObjectAnno,
    QAPair,
    SceneAnnotation,
    TIE_MARGIN,
)


def _phrase(scene: SceneAnnotation, obj: ObjectAnno) -> Optional[str]:
    """Rebuild the unambiguous mention of an object, or None."""
    same = [o for o in scene.objects if o.cls == obj.cls]
    if len(same) == 1:
        return f"the {obj.cls}"
    colors = [o.attributes.get("color") for o in same]
    if all(colors) and len(set(colors)) == len(colors):
        return f"the {obj.attributes['color']} {obj.cls}"
    return None


def _relation_holds(scene: SceneAnnotation, a: ObjectAnno, b: ObjectAnno,
                    rel: str, cfg: RelationConfig) -> bool:
    """Does `a rel b` hold, from raw centroids and the observer pose?"""
    if rel in ("near", "far-from"):
        dist = math.dist(a.centroid, b.centroid)
        if rel == "near":
            return dist < cfg.near_threshold(scene.tier)
        return dist > cfg.far_threshold(scene.tier)
    rad = math.radians(scene.observer.facing_deg)
    fx, fy = math.cos(rad), math.sin(rad)
    dx = a.centroid[0] - b.centroid[0]
    dy = a.centroid[1] - b.centroid[1]
    d_long = dx * fx + dy * fy
    d_lat = dx * fy - dy * fx  # projection on the rightward axis
    if d_lat == 0.0 and d_long == 0.0:
        return False
    margin = math.radians(cfg.dead_zone_deg)
    if rel in ("left-of", "right-of"):
        # outside the dead zone around the facing axis: |lat| >= tan(m)*|long|
        if abs(d_lat) < math.tan(margin) * abs(d_long):
            return False
        return d_lat < 0 if rel == "left-of" else d_lat > 0
    if rel in ("in-front-of", "behind"):
        if d_long == 0.0 or abs(d_lat) > abs(d_long) / math.tan(margin):
            return False
        return d_long > 0 if rel == "in-front-of" else d_long < 0
    raise ValueError(f"unknown relation {rel!r}")


def _direction(scene: SceneAnnotation, obj: ObjectAnno) -> str:
    """Observer-frame quadrant by component comparison (no angles)."""
    rad = math.radians(scene.observer.facing_deg)
    fx, fy = math.cos(rad), math.sin(rad)
    qx = obj.centroid[0] - scene.observer.position[0]
    qy = obj.centroid[1] - scene.observer.position[1]
    lon = qx * fx + qy * fy
    lat = qx * fy - qy * fx
    if lon >= abs(lat) and lon > 0:
        return "ahead"
    if -lon >= abs(lat) and lon < 0:
        return "behind"
    return "right" if lat > 0 else "left"


def expected_answer(pair: QAPair, scene: SceneAnnotation,
                    cfg: Optional[RelationConfig] = None) -> Optional[str]:
    """Answer the oracle derives for this pair, or None if it cannot.

    Uses the pair's provenance only to identify which objects/facts the
    question is about; every fact is then recomputed from the annotation.
    """
    cfg = cfg or RelationConfig()
    objs = {o.id: o for o in scene.objects}

    if pair.qtype == "Localization":
        (target_id, rel, landmark_id), = pair.provenance
        target, landmark = objs[target_id], objs[landmark_id]
        if not _relation_holds(scene, target, landmark, rel, cfg):
            return None
        phrase = _phrase(scene, landmark)
        return None if phrase is None else f"{RELATION_SURFACE[rel]} {phrase}"

    if pair.qtype == "Measurement":
        if len(pair.provenance) == 1:
            (cls, pred, _), = pair.provenance
            if pred != "count":
                return None
            return str(sum(o.cls == cls for o in scene.objects))
        (a_id, _, _), (b_id, _, _) = pair.provenance
        a, b = objs[a_id], objs[b_id]
        if abs(a.extents[2] - b.extents[2]) <= TIE_MARGIN:
            return None
        winner = a if a.extents[2] > b.extents[2] else b
        phrase = _phrase(scene, winner)
        return phrase

    if pair.qtype == "Functionality":
        (obj_id, pred, _), = pair.provenance
        obj = objs[obj_id]
        if pred == "functionality":
            return obj.attributes.get("functionality")
        if pred == "observer-direction":
            return _direction(scene, obj)
        return None

    if pair.qtype == "Logicality":
        first, second = pair.provenance
        if first[1] == "distance-to-observer":
            a, b = objs[first[0]], objs[second[0]]
            da = math.dist(scene.observer.position, a.centroid)
            db = math.dist(scene.observer.position, b.centroid)
            if abs(da - db) <= TIE_MARGIN:
                return None
            winner = a if da < db else b
            color = winner.attributes.get("color")
            return None if color is None else f"the {color} one"
        # chained: provenance = [(x, rel, r), (winner, nearest-<cls>-to, x)]
        x_id, rel, r_id = first
        x, r = objs[x_id], objs[r_id]
        if sum(o.cls == r.cls for o in scene.objects) != 1:
            return None
        qualified = [o for o in scene.objects if o.cls == x.cls
                     and _relation_holds(scene, o, r, rel, cfg)]
        if len(qualified) != 1 or qualified[0].id != x_id:
            return None
        target_cls = second[1].removeprefix("nearest-").removesuffix("-to")
        candidates = [o for o in scene.objects if o.cls == target_cls]
        if len(candidates) < 2:
            return None
        ranked = sorted(
            (math.dist(x.centroid, o.centroid), o.id, o) for o in candidates
        )
        if ranked[1][0] - ranked[0][0] <= TIE_MARGIN:
            return None
        color = ranked[0][2].attributes.get("color")
        return None if color is None else f"the {color} one"

    return None


def verify_pair(pair: QAPair, scene: SceneAnnotation,
                cfg: Optional[RelationConfig] = None) -> bool:
    """True when the re-derived answer matches the emitted one exactly."""
    return expected_answer(pair, scene, cfg) == pair.answer


def verify_corpus(pairs: list, scenes: list,
                  cfg: Optional[RelationConfig] = None) -> list:
    """Ids of pairs the oracle disagrees with (empty means full agreement)."""
    by_id = {s.scene_id: s for s in scenes}
    return [p.id for p in pairs if not verify_pair(p, by_id[p.scene_id], cfg)]
