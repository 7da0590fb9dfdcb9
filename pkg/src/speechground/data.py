"""Procedural audio-visual scenes.

A fixed vocabulary of concept vectors is pushed through two random linear
maps, one "visual" and one "acoustic". A scene places grid-aligned objects
on a feature grid and speaks the categories that should be grounded; objects
of categories that are not spoken are distractors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fusion_decoder import VisualFeatures, grid_anchors
from .losses import Box, GroundTruthObject
from .qsa import SpeechSequence

EVAL_SEED_OFFSET = 1_000_000_000
MAX_PLACEMENT_RETRIES = 100


class SceneGenerationError(RuntimeError):
    pass


@dataclass
class ConceptVocabulary:
    seed: int
    concepts: np.ndarray  # (C, d_c), unit rows
    acoustic_map: np.ndarray  # (d, d_c)
    visual_map: np.ndarray  # (d, d_c)

    @classmethod
    def create(cls, seed: int, n_concepts: int = 10, d: int = 32, d_concept: int = 16):
        rng = np.random.default_rng([seed, 0xC0C])
        c = rng.normal(size=(n_concepts, d_concept))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        acoustic = rng.normal(size=(d, d_concept))
        visual = rng.normal(size=(d, d_concept))
        return cls(seed, c, acoustic, visual)

    @property
    def n_concepts(self) -> int:
        return self.concepts.shape[0]

    @property
    def d(self) -> int:
        return self.acoustic_map.shape[0]

    def acoustic(self, c: int) -> np.ndarray:
        return self.acoustic_map @ self.concepts[c]

    def visual(self, c: int) -> np.ndarray:
        return self.visual_map @ self.concepts[c]


@dataclass(frozen=True)
class SceneParams:
    object_count: tuple[int, int] = (1, 3)  # grounded objects per scene
    mentioned_categories: tuple[int, int] = (1, 1)
    distractor_count: tuple[int, int] = (0, 2)  # objects of unspoken categories
    noise: float = 0.3
    grid: tuple[int, int] = (8, 8)
    frames_per_concept: int = 12
    box_cells: tuple[int, int] = (2, 3)  # min/max box side in grid cells
    n_tokens: int = 8  # aggregated speech tokens the spans refer to


@dataclass
class SceneObject:
    category: int
    box: Box
    cells: np.ndarray  # flat indices of grid positions covered


@dataclass
class SyntheticScene:
    visual: VisualFeatures
    speech: SpeechSequence
    gts: list[GroundTruthObject]
    seed: int
    objects: list[SceneObject] = field(default_factory=list)
    runs: list[tuple[int, int, int]] = field(default_factory=list)  # (category or -1, start, end)

    @property
    def mentioned(self) -> list[int]:
        return [c for c, _, _ in self.runs if c >= 0]


def token_span(start: int, end: int, n_frames: int, n_tokens: int) -> frozenset:
    """Token i covers frames [i*N/K, (i+1)*N/K); return tokens touching [start, end)."""
    span = set()
    for i in range(n_tokens):
        lo = i * n_frames / n_tokens
        hi = (i + 1) * n_frames / n_tokens
        if lo < end and hi > start:
            span.add(i)
    return frozenset(span)


def _place(rng, params: SceneParams, taken: np.ndarray):
    """Sample a box size, then a free grid-aligned location for it."""
    rows, cols = params.grid
    lo, hi = params.box_cells
    grid_taken = taken.reshape(rows, cols)
    for _ in range(10):
        hc = int(rng.integers(lo, hi + 1))
        wc = int(rng.integers(lo, hi + 1))
        free = [
            (r0, c0)
            for r0 in range(rows - hc + 1)
            for c0 in range(cols - wc + 1)
            if not grid_taken[r0 : r0 + hc, c0 : c0 + wc].any()
        ]
        if not free:
            continue
        r0, c0 = free[int(rng.integers(len(free)))]
        mask = np.zeros((rows, cols), dtype=bool)
        mask[r0 : r0 + hc, c0 : c0 + wc] = True
        return Box.from_corners(c0 / cols, r0 / rows, (c0 + wc) / cols, (r0 + hc) / rows), np.flatnonzero(mask)
    raise SceneGenerationError("no free location for an object")


def _layout(rng, params: SceneParams, cats) -> list[SceneObject]:
    # a crowded layout can leave no room for the last object; start over then
    for _ in range(MAX_PLACEMENT_RETRIES):
        taken = np.zeros(params.grid[0] * params.grid[1], dtype=bool)
        objects = []
        try:
            for c in cats:
                box, cells = _place(rng, params, taken)
                taken[cells] = True
                objects.append(SceneObject(c, box, cells))
        except SceneGenerationError:
            continue
        return objects
    raise SceneGenerationError(f"could not lay out {len(cats)} objects after {MAX_PLACEMENT_RETRIES} attempts")


def generate_scene(vocab: ConceptVocabulary, seed: int, params: SceneParams = SceneParams()) -> SyntheticScene:
    rng = np.random.default_rng([vocab.seed, seed])
    rows, cols = params.grid
    P = rows * cols
    d = vocab.d

    n_obj = int(rng.integers(params.object_count[0], params.object_count[1] + 1))
    n_cat = 0
    if n_obj:
        n_cat = int(rng.integers(params.mentioned_categories[0], params.mentioned_categories[1] + 1))
        n_cat = min(n_cat, n_obj)
    n_dis = int(rng.integers(params.distractor_count[0], params.distractor_count[1] + 1))
    if n_cat + (1 if n_dis else 0) > vocab.n_concepts:
        raise SceneGenerationError("not enough concepts for the requested categories")

    perm = rng.permutation(vocab.n_concepts)
    spoken = [int(c) for c in perm[:n_cat]]
    unspoken = [int(c) for c in perm[n_cat:]]
    # every spoken category gets at least one object
    cats = spoken + [spoken[int(rng.integers(len(spoken)))] for _ in range(n_obj - n_cat)]
    cats += [unspoken[int(rng.integers(len(unspoken)))] for _ in range(n_dis)]

    objects = _layout(rng, params, cats)

    positions = rng.normal(0.0, params.noise, size=(P, d)) if params.noise else np.zeros((P, d))
    for obj in objects:
        positions[obj.cells] += vocab.visual(obj.category)

    # one run per spoken category, ordered by first object index
    fpc = params.frames_per_concept
    runs = []
    if spoken:
        for i, c in enumerate(dict.fromkeys(cats[:n_obj])):
            runs.append((c, i * fpc, (i + 1) * fpc))
    else:
        runs.append((-1, 0, fpc))
    n_frames = fpc * len(runs)
    frames = rng.normal(0.0, params.noise, size=(n_frames, d)) if params.noise else np.zeros((n_frames, d))
    for c, start, end in runs:
        if c >= 0:
            frames[start:end] += vocab.acoustic(c)

    spans = {c: token_span(s, e, n_frames, params.n_tokens) for c, s, e in runs if c >= 0}
    gts = [GroundTruthObject(o.box, o.category, spans[o.category]) for o in objects[:n_obj]]
    visual = VisualFeatures(positions, params.grid, grid_anchors(rows, cols))
    return SyntheticScene(visual, SpeechSequence(frames), gts, seed, objects, runs)


def generate_corpus(vocab: ConceptVocabulary, count: int, params: SceneParams = SceneParams(), first_seed: int = 0):
    return [generate_scene(vocab, first_seed + i, params) for i in range(count)]


def eval_corpus(vocab: ConceptVocabulary, eval_seed: int, count: int, params: SceneParams = SceneParams()):
    """Scenes from a seed range disjoint from any training corpus."""
    if count < 1:
        raise ValueError("evaluation corpus must not be empty")
    return generate_corpus(vocab, count, params, EVAL_SEED_OFFSET + eval_seed * 100_000)


def save_scene(scene: SyntheticScene, path) -> None:
    width = max((len(g.token_span) for g in scene.gts), default=0)
    spans = np.full((len(scene.gts), width), -1, dtype=np.int64)
    for i, g in enumerate(scene.gts):
        spans[i, : len(g.token_span)] = sorted(g.token_span)
    np.savez(
        path,
        visual=scene.visual.positions,
        grid=np.array(scene.visual.grid_size),
        speech=scene.speech.frames,
        gt_boxes=np.array([g.box.as_array() for g in scene.gts]).reshape(-1, 4),
        gt_categories=np.array([g.category for g in scene.gts], dtype=np.int64),
        gt_spans=spans,
        runs=np.array(scene.runs, dtype=np.int64).reshape(-1, 3),
        seed=np.array(scene.seed),
    )


def load_scene(path) -> SyntheticScene:
    with np.load(path) as z:
        grid = tuple(int(x) for x in z["grid"])
        gts = [
            GroundTruthObject(Box(*b), int(c), frozenset(int(t) for t in sp if t >= 0))
            for b, c, sp in zip(z["gt_boxes"], z["gt_categories"], z["gt_spans"])
        ]
        runs = [tuple(int(x) for x in r) for r in z["runs"]]
        return SyntheticScene(
            VisualFeatures(z["visual"], grid, grid_anchors(*grid)),
            SpeechSequence(z["speech"]),
            gts,
            int(z["seed"]),
            [],
            runs,
        )
