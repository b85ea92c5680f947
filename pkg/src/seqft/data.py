"""Synthetic segmentation tasks, SSL scoring of samples, and the replay buffer."""

from __future__ import annotations

import dataclasses
import json
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from . import nn
from . import numerics as nx
from .nn import ConfigError, ModelState
from .numerics import ContractError, Rng

SHAPE_FAMILIES = ("disk", "ring", "bar", "blob", "checker")
IMAGE_SIZE = 32


@dataclasses.dataclass(frozen=True)
class TaskSpec:
    task_id: str
    class_count: int = 2
    shape_family: str = "disk"
    intensity_shift: float = 0.0
    noise_sigma: float = 0.05
    n_train: int = 32
    n_test: int = 16
    seed: int = 0
    artifact_fraction: float = 0.25

    def validate(self) -> None:
        if self.class_count < 2:
            raise ConfigError(f"{self.task_id}: class_count must be >= 2")
        if self.shape_family not in SHAPE_FAMILIES + ("mixed",):
            raise ConfigError(f"{self.task_id}: unknown shape family {self.shape_family!r}")
        if self.n_train < 1 or self.n_test < 0:
            raise ConfigError(f"{self.task_id}: need n_train >= 1 and n_test >= 0")
        if not 0.0 <= self.intensity_shift <= 0.5:
            raise ConfigError(f"{self.task_id}: intensity_shift must lie in [0, 0.5]")
        if self.noise_sigma < 0 or not 0.0 <= self.artifact_fraction <= 1.0:
            raise ConfigError(f"{self.task_id}: invalid noise_sigma or artifact_fraction")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class Sample:
    image: np.ndarray  # (1, 32, 32) float32 in [0, 1]
    mask: np.ndarray  # (32, 32) uint8
    sample_id: tuple[str, int]


@dataclasses.dataclass
class TaskDataset:
    spec: TaskSpec
    images: np.ndarray  # (N, 1, 32, 32)
    masks: np.ndarray  # (N, 32, 32)

    @property
    def task_id(self) -> str:
        return self.spec.task_id

    @property
    def classes(self) -> int:
        return self.spec.class_count

    @property
    def train_idx(self) -> np.ndarray:
        return np.arange(self.spec.n_train)

    @property
    def test_idx(self) -> np.ndarray:
        return np.arange(self.spec.n_train, self.spec.n_train + self.spec.n_test)

    def sample(self, index: int) -> Sample:
        return Sample(self.images[index], self.masks[index], (self.task_id, int(index)))


# --- generation -----------------------------------------------------------------------
def _grid():
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    return yy.astype(np.float64), xx.astype(np.float64)


def _shape_labels(family: str, classes: int, rng: Rng) -> np.ndarray:
    """Integer label map; class c > 0 marks the c-th nested/adjacent structure."""
    yy, xx = _grid()
    lab = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
    cy, cx = rng.uniform(10, 22, 2, dtype=np.float64)
    if family == "disk":
        r = rng.uniform(5, 9, dtype=np.float64)
        d = np.hypot(yy - cy, xx - cx)
        lab[d <= r] = 1
        if classes > 2:
            lab[d <= r * 0.45] = 2
    elif family == "ring":
        r = rng.uniform(6, 10, dtype=np.float64)
        t = rng.uniform(2, 3.5, dtype=np.float64)
        d = np.hypot(yy - cy, xx - cx)
        lab[(d <= r) & (d > r - t)] = 1
        if classes > 2:
            lab[d <= max(r - t - 2.0, 1.5)] = 2
    elif family == "bar":
        length = rng.uniform(14, 24, dtype=np.float64)
        thick = rng.uniform(3, 6, dtype=np.float64)
        horizontal = rng.random() < 0.5
        along, across = (xx - cx, yy - cy) if horizontal else (yy - cy, xx - cx)
        lab[(np.abs(along) <= length / 2) & (np.abs(across) <= thick / 2)] = 1
        if classes > 2:
            lab[(np.abs(along - length / 4) <= length / 8) & (np.abs(across) <= thick / 2)] = 2
    elif family == "blob":
        field = np.zeros_like(yy)
        for _ in range(3):
            by, bx = cy + rng.uniform(-4, 4, 2, dtype=np.float64)
            s = rng.uniform(2.5, 4.5, dtype=np.float64)
            field += np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * s * s))
        lab[field > 0.5] = 1
        if classes > 2:
            lab[field > 1.2] = 2
    elif family == "checker":
        half = rng.uniform(6, 10, dtype=np.float64)
        inside = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
        lab[inside] = 1
        if classes > 2:
            cell = ((np.floor((yy - cy) / 3) + np.floor((xx - cx) / 3)) % 2) == 0
            lab[inside & cell] = 2
    else:
        raise ConfigError(f"unknown shape family {family!r}")
    return lab


def _render(spec: TaskSpec, lab: np.ndarray, rng: Rng, family: str) -> np.ndarray:
    yy, xx = _grid()
    bg = rng.uniform(0.12, 0.22, dtype=np.float64)
    tilt = rng.uniform(-0.04, 0.04, 2, dtype=np.float64)
    img = bg + tilt[0] * (yy / IMAGE_SIZE - 0.5) + tilt[1] * (xx / IMAGE_SIZE - 0.5)
    for c in range(1, spec.class_count):
        level = 0.14 * c + rng.uniform(-0.02, 0.02, dtype=np.float64)
        img = img + level * (lab == c)
    if family == "checker":
        img = img + 0.05 * (lab > 0) * ((np.floor(yy / 2) + np.floor(xx / 2)) % 2)
    sigma = spec.noise_sigma
    if rng.random() < spec.artifact_fraction:
        # nuisance artifact: heavy noise plus streaks, unlike the pretraining corpus
        sigma *= 3.0
        period = rng.uniform(3, 6, dtype=np.float64)
        img = img + 0.08 * np.sin(2 * np.pi * (yy + xx) / period)
    img = img + rng.normal(0.0, 1.0, (IMAGE_SIZE, IMAGE_SIZE), dtype=np.float64) * sigma
    return np.clip(img + spec.intensity_shift, 0.0, 1.0).astype(np.float32)


def generate_sample(spec: TaskSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    rng = Rng(spec.seed, "sample", spec.task_id, index)
    family = spec.shape_family
    if family == "mixed":
        family = SHAPE_FAMILIES[int(rng.integers(0, len(SHAPE_FAMILIES)))]
    lab = _shape_labels(family, spec.class_count, rng)
    return _render(spec, lab, rng, family)[None], lab


def generate_task(spec: TaskSpec) -> TaskDataset:
    """Deterministic in ``spec``; train rows come first, then test rows."""
    spec.validate()
    n = spec.n_train + spec.n_test
    images = np.zeros((n, 1, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    masks = np.zeros((n, IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
    for i in range(n):
        images[i], masks[i] = generate_sample(spec, i)
    return TaskDataset(spec, images, masks)


TRAIN_SIZES = (104, 242, 224, 100, 50)
DEFAULT_CLASSES = (3, 2, 3, 2, 2)
DEFAULT_SHIFTS = (0.0, 0.08, 0.16, 0.24, 0.32)


def default_suite(seed: int = 0, scale: int = 4, n_test: int = 24) -> list[TaskSpec]:
    """Five tasks with distinct shapes, rising intensity shift and uneven sizes."""
    return [
        TaskSpec(
            task_id=f"task{t + 1}_{fam}",
            class_count=DEFAULT_CLASSES[t],
            shape_family=fam,
            intensity_shift=DEFAULT_SHIFTS[t],
            n_train=max(1, int(round(TRAIN_SIZES[t] / scale))),
            n_test=n_test,
            seed=seed,
        )
        for t, fam in enumerate(SHAPE_FAMILIES)
    ]


def pretrain_corpus_spec(seed: int = 0, n: int = 256) -> TaskSpec:
    """Clean mixed-shape images used only for SSL pretraining."""
    return TaskSpec(
        task_id="pretrain",
        class_count=3,
        shape_family="mixed",
        intensity_shift=0.0,
        noise_sigma=0.05,
        n_train=n,
        n_test=64,
        seed=seed,
        artifact_fraction=0.0,
    )


# --- persistence -----------------------------------------------------------------------
def save_task(ds: TaskDataset, directory: str | Path) -> None:
    """Manifest JSON plus ``{index:05}.img`` (f32 LE) and ``.msk`` (u8) per sample."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "spec": ds.spec.to_dict(),
        "image_shape": list(ds.images.shape[1:]),
        "count": int(ds.images.shape[0]),
        "train": [0, ds.spec.n_train],
        "test": [ds.spec.n_train, ds.spec.n_train + ds.spec.n_test],
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for i in range(ds.images.shape[0]):
        (d / f"{i:05}.img").write_bytes(ds.images[i].astype("<f4").tobytes())
        (d / f"{i:05}.msk").write_bytes(ds.masks[i].astype(np.uint8).tobytes())


def load_task(directory: str | Path) -> TaskDataset:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    spec = TaskSpec(**manifest["spec"])
    shape = tuple(manifest["image_shape"])
    n = manifest["count"]
    images = np.stack([np.frombuffer((d / f"{i:05}.img").read_bytes(), dtype="<f4").reshape(shape) for i in range(n)])
    masks = np.stack(
        [np.frombuffer((d / f"{i:05}.msk").read_bytes(), dtype=np.uint8).reshape(shape[1:]) for i in range(n)]
    )
    return TaskDataset(spec, images.astype(np.float32), masks)


# --- SSL scoring -------------------------------------------------------------------------
MASK_RATIO = 0.6


def sample_mask_rng(seed: int, sample_id: tuple[str, int]) -> Rng:
    """Per-sample mask stream, ``Rng(seed, "mds", task_id, index)``."""
    return Rng(seed, "mds", sample_id[0], sample_id[1])


def ssl_run_losses(
    model0: ModelState,
    image: np.ndarray,
    runs: int,
    rng: Rng,
    mask_ratio: float = MASK_RATIO,
    chunk: int = 250,
) -> np.ndarray:
    """Masked-reconstruction MSE for ``runs`` independent masks of one image."""
    if runs < 1:
        raise ContractError("runs must be at least 1")
    meta = model0.meta
    masks = nn.random_mask(meta, mask_ratio, rng, runs).reshape(runs, meta.tokens)
    patches = nn.patchify(meta, image[None])
    out = np.empty(runs, dtype=np.float64)
    with nx.no_grad():
        for lo in range(0, runs, chunk):
            hi = min(lo + chunk, runs)
            n = hi - lo
            tiled = np.tile(patches, (n, 1))
            m = masks[lo:hi].reshape(-1)
            feats = nn.encode(meta, model0.params, tiled, m)
            recon = nn.dense(model0.params, "ssl_head", feats).data
            sq = ((recon.astype(np.float64) - tiled) ** 2).reshape(n, meta.tokens, -1).mean(axis=2)
            mk = masks[lo:hi]
            out[lo:hi] = (sq * mk).sum(axis=1) / mk.sum(axis=1)
    return out


def ssl_sample_loss(model0: ModelState, sample: Sample, runs: int = 1000, seed: int = 0, mask_ratio: float = MASK_RATIO) -> float:
    """Average masked-reconstruction loss of one sample over ``runs`` mask draws."""
    if runs < 1:
        raise ContractError("runs must be at least 1")
    rng = sample_mask_rng(seed, sample.sample_id)
    return float(ssl_run_losses(model0, sample.image, runs, rng, mask_ratio).mean())


def ssl_scores(model0: ModelState, ds: TaskDataset, runs: int = 1000, seed: int = 0) -> np.ndarray:
    """``ssl_sample_loss`` for every training sample, in index order."""
    return np.array([ssl_sample_loss(model0, ds.sample(i), runs, seed) for i in ds.train_idx])


# --- buffer ------------------------------------------------------------------------------
@dataclasses.dataclass
class BufferEntry:
    task_id: str
    index: int
    avg_ssl_loss: float | None  # None when the entry was not chosen by score


class Buffer:
    """Replay samples from finished tasks, at most ``k`` per task."""

    def __init__(self, k: int):
        self.k = k
        self.entries: list[BufferEntry] = []
        self.datasets: dict[str, TaskDataset] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, ds: TaskDataset, entries: Sequence[BufferEntry]) -> None:
        if len(entries) > self.k:
            raise ContractError(f"{len(entries)} entries for {ds.task_id} exceed K={self.k}")
        train = set(int(i) for i in ds.train_idx)
        for e in entries:
            if e.index not in train:
                raise ContractError(f"index {e.index} of {ds.task_id} is not a training sample")
        self.entries = [e for e in self.entries if e.task_id != ds.task_id] + list(entries)
        self.datasets[ds.task_id] = ds

    def sample(self, entry: BufferEntry) -> Sample:
        return self.datasets[entry.task_id].sample(entry.index)

    def to_json(self) -> list[dict]:
        return [dataclasses.asdict(e) for e in self.entries]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def from_json(cls, k: int, rows: list[dict], datasets: dict[str, TaskDataset]) -> Buffer:
        buf = cls(k)
        for tid in dict.fromkeys(r["task_id"] for r in rows):
            buf.add(datasets[tid], [BufferEntry(**r) for r in rows if r["task_id"] == tid])
        return buf


def buffer_batch(buffer: Buffer, batch_size: int, rng: Rng, policy: str = "uniform") -> list[Sample]:
    """Draw with replacement; ``uniform`` over entries or ``task_balanced``."""
    if not buffer.entries:
        raise ContractError("buffer is empty")
    if policy == "uniform":
        picks = rng.integers(0, len(buffer.entries), batch_size)
        chosen = [buffer.entries[int(i)] for i in picks]
    elif policy == "task_balanced":
        tasks = list(dict.fromkeys(e.task_id for e in buffer.entries))
        chosen = []
        for t in rng.integers(0, len(tasks), batch_size):
            pool = [e for e in buffer.entries if e.task_id == tasks[int(t)]]
            chosen.append(pool[int(rng.integers(0, len(pool)))])
    else:
        raise ConfigError(f"unknown buffer policy {policy!r}")
    return [buffer.sample(e) for e in chosen]


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])
