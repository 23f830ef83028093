"""Task streams, labeled sample sets, splits and score normalization."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import yaml

from .seeding import derive_seed

CROP_SIZE = 300
PHASES = ("train", "val", "test")


class DataAccessError(RuntimeError):
    """Raised when a learner reads data it is not allowed to see."""


@dataclass(frozen=True)
class LabeledSample:
    input: np.ndarray | str
    score: float
    distortion_id: int
    reference_id: str | None = None
    source_range: tuple[float, float] = (0.0, 1.0)


@dataclass
class SampleSet:
    """Column-oriented collection of labeled samples.

    ``inputs`` is either an ``(n, d_in)`` float array of synthetic source
    vectors or a list of image paths / ``(H, W, C)`` arrays.
    """

    inputs: np.ndarray | list
    scores: np.ndarray
    distortion_ids: np.ndarray
    reference_ids: list[str] | None = None
    source_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.distortion_ids = np.asarray(self.distortion_ids, dtype=np.int64)
        n = len(self.scores)
        if len(self.inputs) != n or len(self.distortion_ids) != n:
            raise ValueError("inputs, scores and distortion_ids must have equal length")
        if self.reference_ids is not None and len(self.reference_ids) != n:
            raise ValueError("reference_ids must match the number of samples")
        if n and (self.scores.min() < 0.0 or self.scores.max() > 1.0):
            raise ValueError("normalized scores must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.scores)

    def __getitem__(self, i: int) -> LabeledSample:
        ref = None if self.reference_ids is None else self.reference_ids[i]
        return LabeledSample(self.inputs[i], float(self.scores[i]), int(self.distortion_ids[i]), ref,
                             self.source_range)

    @property
    def is_vector(self) -> bool:
        return isinstance(self.inputs, np.ndarray) and self.inputs.ndim == 2

    def subset(self, index: Sequence[int] | np.ndarray) -> SampleSet:
        index = np.asarray(index, dtype=np.int64)
        if isinstance(self.inputs, np.ndarray):
            inputs = self.inputs[index]
        else:
            inputs = [self.inputs[i] for i in index]
        refs = None if self.reference_ids is None else [self.reference_ids[i] for i in index]
        return SampleSet(inputs, self.scores[index], self.distortion_ids[index], refs, self.source_range)

    def for_distortion(self, j: int) -> SampleSet:
        return self.subset(np.flatnonzero(self.distortion_ids == j))

    @classmethod
    def concat(cls, sets: Iterable[SampleSet]) -> SampleSet:
        sets = [s for s in sets if len(s)]
        if not sets:
            raise ValueError("nothing to concatenate")
        if all(isinstance(s.inputs, np.ndarray) for s in sets):
            inputs = np.concatenate([s.inputs for s in sets])
        else:
            inputs = [x for s in sets for x in s.inputs]
        refs = None
        if all(s.reference_ids is not None for s in sets):
            refs = [r for s in sets for r in s.reference_ids]
        return cls(inputs, np.concatenate([s.scores for s in sets]),
                   np.concatenate([s.distortion_ids for s in sets]), refs)


@dataclass
class TaskSpec:
    task_index: int
    distortion_ids: tuple[int, ...]
    train: SampleSet
    val: SampleSet
    test: SampleSet

    def __post_init__(self) -> None:
        allowed = set(self.distortion_ids)
        for phase in PHASES:
            ids = set(getattr(self, phase).distortion_ids.tolist())
            if not ids <= allowed:
                raise ValueError(f"task {self.task_index} {phase} split holds foreign distortions {sorted(ids - allowed)}")


@dataclass
class TaskStream:
    tasks: list[TaskSpec]
    M0: int
    delta: int
    labels: dict[int, str] = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for t, task in enumerate(self.tasks):
            if task.task_index != t:
                raise ValueError("tasks must be indexed consecutively from 0")
            expected = self.M0 if t == 0 else self.delta
            if len(task.distortion_ids) != expected:
                raise ValueError(f"task {t} has {len(task.distortion_ids)} distortions, expected {expected}")
            overlap = seen & set(task.distortion_ids)
            if overlap:
                raise ValueError(f"distortion ids {sorted(overlap)} appear in more than one task")
            seen |= set(task.distortion_ids)

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def M_all(self) -> int:
        return self.M0 + self.delta * (len(self.tasks) - 1)

    def m_cur(self, t: int) -> int:
        return self.M0 + self.delta * t

    def m_pre(self, t: int) -> int:
        if t < 1:
            raise ValueError("M_pre is defined for novel tasks only (t >= 1)")
        return self.M0 + self.delta * (t - 1)

    def seen_ids(self, t: int) -> list[int]:
        return [j for task in self.tasks[: t + 1] for j in task.distortion_ids]

    def intro_task(self) -> dict[int, int]:
        return {j: task.task_index for task in self.tasks for j in task.distortion_ids}


class AuditedStream:
    """Read handle over a stream that records and polices data access.

    Training may only read the current task's train/val splits unless the
    learner was granted access to the past (joint training).  Test splits of
    any seen task are readable for evaluation.
    """

    def __init__(self, stream: TaskStream):
        self.stream = stream
        self.log: list[tuple[int, str, int]] = []
        self._current: int | None = None
        self._allow_past = False
        self._allow_past_val = False

    def begin_task(self, t: int, allow_past: bool = False, allow_past_val: bool = False) -> None:
        self._current = t
        self._allow_past = allow_past
        self._allow_past_val = allow_past_val

    def task(self, t: int) -> TaskSpec:
        return self.stream.tasks[t]

    def _read(self, t: int, phase: str) -> SampleSet:
        if self._current is None:
            raise DataAccessError("begin_task() must be called before reading data")
        if t > self._current:
            raise DataAccessError(f"task {t} has not arrived yet (current task {self._current})")
        permitted = self._allow_past or (phase == "val" and self._allow_past_val)
        if phase != "test" and t < self._current and not permitted:
            raise DataAccessError(f"{phase} data of past task {t} is not available at task {self._current}")
        self.log.append((self._current, phase, t))
        return getattr(self.stream.tasks[t], phase)

    def train(self, t: int) -> SampleSet:
        return self._read(t, "train")

    def val(self, t: int) -> SampleSet:
        return self._read(t, "val")

    def test(self, t: int) -> SampleSet:
        return self._read(t, "test")


def rescale_scores(raw, score_range: tuple[float, float], higher_is_better: bool = True) -> np.ndarray:
    """Affinely map raw annotations onto [0, 1] with higher meaning better.

    DMOS-style annotations (``higher_is_better=False``) are flipped.
    """
    lo, hi = map(float, score_range)
    if not lo < hi:
        raise ValueError(f"invalid score range ({lo}, {hi})")
    raw = np.asarray(raw, dtype=np.float64)
    bad = np.flatnonzero((raw < lo) | (raw > hi) | ~np.isfinite(raw))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"row {i}: raw score {raw[i]} outside range [{lo}, {hi}]")
    out = (raw - lo) / (hi - lo)
    return out if higher_is_better else 1.0 - out


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    quotas = [n * r for r in ratios]
    sizes = [int(np.floor(q + 1e-9)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: -(quotas[i] - sizes[i]))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(samples: SampleSet, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0,
                  by_reference: bool = False, name: str = "dataset") -> tuple[SampleSet, SampleSet, SampleSet]:
    """Randomly partition ``samples`` into train/val/test.

    With ``by_reference`` whole reference-content groups are assigned to a
    single partition so no content is shared between them.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    if not by_reference:
        perm = rng.permutation(len(samples))
        sizes = _largest_remainder(len(samples), ratios)
        cuts = np.cumsum(sizes)[:-1]
        return tuple(samples.subset(np.sort(part)) for part in np.split(perm, cuts))

    if samples.reference_ids is None or any(r is None for r in samples.reference_ids):
        raise ValueError(f"{name}: splitting by reference requires a reference_id on every sample")
    groups = sorted(set(samples.reference_ids))
    if len(groups) < 3:
        raise ValueError(f"{name}: only {len(groups)} reference groups, at least 3 are needed to split by reference")
    order = [groups[i] for i in rng.permutation(len(groups))]
    sizes = _largest_remainder(len(groups), ratios)
    bounds = np.cumsum([0, *sizes])
    refs = np.asarray(samples.reference_ids, dtype=object)
    parts = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        chosen = set(order[a:b])
        parts.append(samples.subset(np.flatnonzero([r in chosen for r in refs])))
    return tuple(parts)


def chunk_novel_ids(novel_ids: Sequence, delta: int, permutation_seed: int | None = None) -> list[list]:
    """Group novel distortions into tasks of ``delta``, optionally shuffled first."""
    novel = list(novel_ids)
    if delta < 1 or len(novel) % delta:
        valid = [d for d in range(1, len(novel) + 1) if len(novel) % d == 0]
        raise ValueError(f"{len(novel)} novel distortions cannot be split in steps of {delta}; valid deltas: {valid}")
    if permutation_seed is not None:
        novel = [novel[i] for i in np.random.default_rng(permutation_seed).permutation(len(novel))]
    return [novel[i:i + delta] for i in range(0, len(novel), delta)]


def _assemble_stream(groups: list[list], data_of: Callable[[object], tuple[SampleSet, SampleSet, SampleSet]],
                     M0: int, delta: int, seed: int | None = None) -> TaskStream:
    # global ids are assigned consecutively in stream order
    tasks, labels, next_id = [], {}, 0
    for t, group in enumerate(groups):
        ids, parts = [], {p: [] for p in PHASES}
        for label in group:
            labels[next_id] = str(label)
            for phase, part in zip(PHASES, data_of(label)):
                part = SampleSet(part.inputs, part.scores, np.full(len(part), next_id), part.reference_ids,
                                 part.source_range)
                parts[phase].append(part)
            ids.append(next_id)
            next_id += 1
        sets = {}
        for p in PHASES:
            non_empty = [s for s in parts[p] if len(s)]
            sets[p] = SampleSet.concat(non_empty) if non_empty else _empty_like(parts[p][0])
        tasks.append(TaskSpec(t, tuple(ids), sets["train"], sets["val"], sets["test"]))
    return TaskStream(tasks, M0, delta, labels, seed)


def _empty_like(s: SampleSet) -> SampleSet:
    return s.subset([])


def build_distortion_shift_stream(samples: SampleSet, labels: Sequence[str] | None, base_ids: Sequence[int],
                                  novel_ids: Sequence[int], delta: int, permutation_seed: int | None = None,
                                  split_seed: int = 0, by_reference: bool = True) -> TaskStream:
    """Base task of ``base_ids`` followed by novel tasks of ``delta`` distortions each.

    ``samples.distortion_ids`` hold the dataset's native labels; they are
    remapped to consecutive stream ids.
    """
    if set(base_ids) & set(novel_ids):
        raise ValueError("base and novel distortion sets must be disjoint")
    groups = [list(base_ids)] + chunk_novel_ids(novel_ids, delta, permutation_seed)

    def data_of(native: int):
        part = samples.for_distortion(native)
        if not len(part):
            raise ValueError(f"no samples for distortion {native}")
        return split_dataset(part, seed=derive_seed(split_seed, native), by_reference=by_reference,
                             name=f"distortion {native}")

    stream = _assemble_stream(groups, data_of, len(base_ids), delta, split_seed)
    if labels is not None:
        stream.labels = {j: str(labels[int(native)]) for j, native in
                         zip(range(stream.M_all), [n for g in groups for n in g])}
    return stream


@dataclass
class DatasetManifest:
    name: str
    image_paths: list[str]
    raw_scores: np.ndarray
    distortion_labels: list[str]
    reference_ids: list[str]
    score_range: tuple[float, float]
    higher_is_better: bool = True

    def __post_init__(self) -> None:
        self.raw_scores = np.asarray(self.raw_scores, dtype=np.float64)
        if any(not p for p in self.image_paths):
            raise ValueError(f"{self.name}: empty image path")

    def __len__(self) -> int:
        return len(self.image_paths)

    def to_samples(self, root: str | Path | None = None) -> SampleSet:
        scores = rescale_scores(self.raw_scores, self.score_range, self.higher_is_better)
        paths = [str(Path(root) / p) if root else p for p in self.image_paths]
        refs = [r or None for r in self.reference_ids]
        return SampleSet(paths, scores, np.zeros(len(paths), dtype=np.int64),
                         refs if all(refs) else None, tuple(self.score_range))


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a manifest CSV plus its ``.meta.yaml`` sidecar (score_range, higher_is_better)."""
    path = Path(path)
    meta_path = path.with_suffix(".meta.yaml")
    if not meta_path.exists():
        raise FileNotFoundError(f"missing sidecar metadata {meta_path}")
    meta = yaml.safe_load(meta_path.read_text(encoding="utf-8")) or {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["image_path", "raw_score", "distortion_label", "reference_id"]
        if reader.fieldnames != expected:
            raise ValueError(f"{path}: header must be {','.join(expected)}, got {reader.fieldnames}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"manifest {path} is empty")
    manifest = DatasetManifest(
        name=meta.get("name", path.stem),
        image_paths=[r["image_path"] for r in rows],
        raw_scores=np.array([float(r["raw_score"]) for r in rows]),
        distortion_labels=[r["distortion_label"] for r in rows],
        reference_ids=[r["reference_id"] for r in rows],
        score_range=tuple(meta["score_range"]),
        higher_is_better=bool(meta.get("higher_is_better", True)),
    )
    # validates the range and reports the offending row
    rescale_scores(manifest.raw_scores, manifest.score_range, manifest.higher_is_better)
    return manifest


def build_dataset_shift_stream(manifests: Sequence[DatasetManifest], split_seed: int = 0,
                               root: str | Path | None = None, by_reference: bool | None = None) -> TaskStream:
    """One dataset per task; dataset ``t`` becomes distortion id ``t``."""
    if len(manifests) < 2:
        raise ValueError("a dataset-shift stream needs at least two manifests")
    by_name = {}
    for m in manifests:
        if not len(m):
            raise ValueError(f"manifest {m.name} is empty")
        by_name[m.name] = m

    def data_of(name: str):
        m = by_name[name]
        samples = m.to_samples(root)
        use_refs = samples.reference_ids is not None if by_reference is None else by_reference
        return split_dataset(samples, seed=derive_seed(split_seed, len(name), *map(ord, name)),
                             by_reference=use_refs, name=name)

    return _assemble_stream([[m.name] for m in manifests], data_of, 1, 1, split_seed)


QUALITY_MAPS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda u: u,
    # monotone cubic, fixes 0 and 1
    "cubic": lambda u: 3.0 * u ** 2 - 2.0 * u ** 3,
    "reversed": lambda u: 1.0 - u,
}


@dataclass
class SyntheticFamilySpec:
    distortion_id: int
    cluster_mean: np.ndarray
    cluster_spread: float
    intensity_axis: np.ndarray
    intensity_scale: float = 3.0
    quality_map: str = "cubic"
    samples_per_family: int = 150

    def __post_init__(self) -> None:
        self.cluster_mean = np.asarray(self.cluster_mean, dtype=np.float64)
        axis = np.asarray(self.intensity_axis, dtype=np.float64)
        self.intensity_axis = axis / np.linalg.norm(axis)
        if self.cluster_spread <= 0:
            raise ValueError("cluster_spread must be positive")
        if self.quality_map not in QUALITY_MAPS:
            raise ValueError(f"unknown quality_map {self.quality_map!r}; choose from {sorted(QUALITY_MAPS)}")

    def to_dict(self) -> dict:
        return {"distortion_id": self.distortion_id, "cluster_mean": self.cluster_mean.tolist(),
                "cluster_spread": self.cluster_spread, "intensity_axis": self.intensity_axis.tolist(),
                "intensity_scale": self.intensity_scale, "quality_map": self.quality_map,
                "samples_per_family": self.samples_per_family}


def make_family_specs(n_families: int, d_in: int = 16, spread: float = 1.0, separation: float = 4.0,
                      intensity_scale: float = 3.0, samples_per_family: int = 150, quality_map: str = "cubic",
                      seed: int = 0) -> list[SyntheticFamilySpec]:
    """Random families whose cluster means are at least ``separation`` spreads apart."""
    rng = np.random.default_rng(seed)
    means: list[np.ndarray] = []
    radius = separation * spread
    while len(means) < n_families:
        for _ in range(10_000):
            cand = rng.normal(size=d_in)
            cand *= radius / np.linalg.norm(cand) * rng.uniform(0.8, 1.2)
            if all(np.linalg.norm(cand - m) >= separation * spread for m in means):
                means.append(cand)
                break
        else:
            radius *= 1.1
    axes = rng.normal(size=(n_families, d_in))
    return [SyntheticFamilySpec(j, means[j], spread, axes[j], intensity_scale, quality_map, samples_per_family)
            for j in range(n_families)]


def sample_family(spec: SyntheticFamilySpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw ``(inputs, scores, intensities)`` for one family.

    The isotropic scatter is projected off the family's own intensity axis,
    so the intensity (and hence the score ranking) is exactly recoverable.
    """
    n, d = spec.samples_per_family, spec.cluster_mean.size
    u = rng.uniform(0.0, 1.0, size=n)
    noise = rng.normal(size=(n, d))
    noise -= np.outer(noise @ spec.intensity_axis, spec.intensity_axis)
    x = spec.cluster_mean + spec.cluster_spread * noise + np.outer(spec.intensity_scale * (u - 0.5),
                                                                   spec.intensity_axis)
    return x, QUALITY_MAPS[spec.quality_map](u), u


def generate_synthetic_stream(family_specs: Sequence[SyntheticFamilySpec], M0: int, delta: int, seed: int,
                              permutation_seed: int | None = None) -> TaskStream:
    """Desk-scale surrogate stream: families in order, the first ``M0`` forming the base task."""
    if len(family_specs) < M0 + delta:
        raise ValueError(f"need at least M0 + delta = {M0 + delta} families, got {len(family_specs)}")
    by_id = {spec.distortion_id: spec for spec in family_specs}
    order = [spec.distortion_id for spec in family_specs]
    groups = [order[:M0]] + chunk_novel_ids(order[M0:], delta, permutation_seed)

    def data_of(native: int):
        spec = by_id[native]
        rng = np.random.default_rng(derive_seed(seed, native))
        x, s, _ = sample_family(spec, rng)
        full = SampleSet(x.astype(np.float32), s, np.full(len(s), native))
        return split_dataset(full, seed=derive_seed(seed, native, 1))

    stream = _assemble_stream(groups, data_of, M0, delta, seed)
    stream.labels = {j: f"family{native}" for j, native in enumerate(n for g in groups for n in g)}
    return stream


def save_synthetic_stream(path: str | Path, family_specs: Sequence[SyntheticFamilySpec], M0: int, delta: int,
                          seed: int, permutation_seed: int | None = None) -> None:
    """Serialize a synthetic stream's recipe (families + seed) as JSON; data regenerates exactly."""
    payload = {"kind": "synthetic_stream", "version": 1, "seed": seed, "M0": M0, "delta": delta,
               "permutation_seed": permutation_seed, "families": [f.to_dict() for f in family_specs]}
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")


def load_synthetic_stream(path: str | Path) -> TaskStream:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    specs = [SyntheticFamilySpec(**f) for f in payload["families"]]
    return generate_synthetic_stream(specs, payload["M0"], payload["delta"], payload["seed"],
                                     payload.get("permutation_seed"))


def crop_for_phase(image, phase: str, rng: np.random.Generator | None = None, size: int = CROP_SIZE):
    """Random ``size`` crop for training, center crop otherwise; vectors pass through."""
    image = np.asarray(image)
    if image.ndim == 1:
        return image
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image of {h}x{w} is smaller than the {size}x{size} crop")
    if phase == "train":
        rng = rng or np.random.default_rng()
        top, left = int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
    else:
        top, left = (h - size) // 2, (w - size) // 2
    return image[top:top + size, left:left + size]
