"""Sequential fine-tuning across a task list, with the ablation strategies.

Each stage is a pure function of its input checkpoints, its configuration
slice and a derived seed. Stage outputs are content-addressed under
``run_dir/stages`` so strategies that share a prefix (and resumed runs)
reuse them instead of recomputing.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import time
from collections.abc import Callable
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data, lora, losses, metrics, nn
from . import numerics as nx
from .data import Buffer, BufferEntry, TaskDataset, TaskSpec
from .nn import ArchMeta, ConfigError, ModelState
from .numerics import AdamW, Rng, Tensor

log = logging.getLogger(__name__)

# stage toggles per strategy: (chain from previous model, buffer source, LoRA-KD + merge)
STRATEGIES: dict[str, tuple[bool, str | None, bool]] = {
    "fft_parallel": (False, None, False),
    "seqft_vanilla": (True, None, False),
    "seqft_random_buffer": (True, "random", False),
    "seqft_mds_only": (True, "mds", False),
    "seqft_kgrft_only": (True, "random", True),
    "medseqft": (True, "mds", True),
}

METRICS_HEADER = ("strategy", "task_id", "eval_task_id", "model_tag", "dice", "hd95", "seed")
FINAL_TAG = "M_t"
MID_TAG = "M_t-mid"


@dataclasses.dataclass
class PipelineConfig:
    tasks: list[TaskSpec] = dataclasses.field(default_factory=data.default_suite)
    arch: ArchMeta = dataclasses.field(default_factory=ArchMeta)
    strategy: str = "medseqft"
    master_seed: int = 0
    k: int = 8
    mds_runs: int = 1000
    mask_ratio: float = 0.6
    lora_rank: int = 2
    lora_scale: float = 1.0
    pretrain_corpus: int = 256
    iters_pretrain: int = 3000
    iters_fft: int = 1500
    iters_lora_kd: int = 600
    batch: int = 8
    kd_batch: int = 8
    kd_every: int = 1
    lr_pretrain: float = 1e-3
    lr_fft: float = 1e-3
    lr_kd: float = 1e-3
    lr_lora: float = 3e-3
    weight_decay: float = 0.0
    buffer_policy: str = "uniform"
    calibrate_decoder: bool = False
    iters_calibrate: int = 200

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if not self.tasks:
            raise ConfigError("task sequence is empty")
        if len({t.task_id for t in self.tasks}) != len(self.tasks):
            raise ConfigError("task ids must be unique")
        for spec in self.tasks:
            spec.validate()
            if self.k > spec.n_train and STRATEGIES[self.strategy][1]:
                raise ConfigError(f"K={self.k} exceeds {spec.task_id} train size {spec.n_train}")
        for name in ("k", "mds_runs", "lora_rank", "batch", "kd_batch", "kd_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("iters_pretrain", "iters_fft", "iters_lora_kd", "iters_calibrate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("lr_pretrain", "lr_fft", "lr_kd", "lr_lora"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["arch"]["decoder_widths"] = list(self.arch.decoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if "tasks" in d:
            d["tasks"] = [t if isinstance(t, TaskSpec) else TaskSpec(**t) for t in d["tasks"]]
        if "arch" in d and not isinstance(d["arch"], ArchMeta):
            d["arch"] = ArchMeta(**d["arch"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def digest(self) -> str:
        return _digest(self.to_dict())


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def stage_seed(master: int, *key) -> int:
    """Deterministic 63-bit seed for a named stage."""
    return int(Rng(master, "stage", *key).integers(0, 2**63 - 1))


# --- stage store ---------------------------------------------------------------------
class StageStore:
    """Content-addressed checkpoints; ``None`` directory keeps them in memory."""

    def __init__(self, directory: Path | None = None):
        self.directory = directory
        self._mem: dict[str, dict[str, np.ndarray]] = {}
        self._json: dict[str, object] = {}
        if directory is not None:
            directory.mkdir(parents=True, exist_ok=True)

    def path(self, key: str) -> Path | None:
        return None if self.directory is None else self.directory / f"{key}.sqft"

    def get(self, key: str) -> dict[str, np.ndarray] | None:
        if key in self._mem:
            return self._mem[key]
        p = self.path(key)
        if p is not None and p.exists():
            self._mem[key] = ckpt.load(p)
            return self._mem[key]
        return None

    def put(self, key: str, params) -> None:
        arrays = {k: (v.data if isinstance(v, Tensor) else v).copy() for k, v in params.items()}
        self._mem[key] = arrays
        p = self.path(key)
        if p is not None:
            ckpt.save(p, arrays)

    def get_json(self, key: str):
        if key in self._json:
            return self._json[key]
        if self.directory is not None:
            p = self.directory / f"{key}.json"
            if p.exists():
                self._json[key] = json.loads(p.read_text())
                return self._json[key]
        return None

    def put_json(self, key: str, obj) -> None:
        self._json[key] = obj
        if self.directory is not None:
            path = self.directory / f"{key}.json"
            tmp = path.with_suffix(f".{os.getpid()}.tmp")
            tmp.write_text(json.dumps(obj, sort_keys=True))
            os.replace(tmp, path)


def _model_from(meta: ArchMeta, arrays: dict[str, np.ndarray]) -> ModelState:
    return ModelState(meta, {k: Tensor(v.copy(), name=k) for k, v in arrays.items()})


def model_hash(model: ModelState) -> str:
    return ckpt.params_hash(model.params)


# --- training helpers ------------------------------------------------------------------
class _Batches:
    """Epoch-shuffled index batches from a fixed pool."""

    def __init__(self, pool: np.ndarray, batch: int, rng: Rng):
        self.pool = np.asarray(pool)
        self.batch = batch
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while self._order.size < self.batch:
            self._order = np.concatenate([self._order, self.pool[self.rng.permutation(self.pool.size)]])
        out, self._order = self._order[: self.batch], self._order[self.batch :]
        return out


def _freeze(model: ModelState) -> ModelState:
    frozen = model.copy()
    frozen.set_trainable(())
    return frozen


def pretrain_ssl(
    meta: ArchMeta,
    corpus: TaskDataset,
    iters: int,
    seed: int,
    lr: float = 1e-3,
    batch: int = 8,
    mask_ratio: float = 0.6,
    weight_decay: float = 0.0,
) -> tuple[ModelState, list[float]]:
    """Masked-patch pretraining of encoder and SSL head; returns M_0 and losses."""
    model = nn.init_model(meta, seed)
    model.set_trainable(("encoder", "ssl_head"))
    trainable = {**model.group("encoder"), **model.group("ssl_head")}
    opt = AdamW(trainable, lr, weight_decay=weight_decay)
    rng = Rng(seed, "pretrain")
    batches = _Batches(corpus.train_idx, batch, rng.child("batches"))
    mask_rng = rng.child("masks")
    history = []
    for _ in range(iters):
        idx = batches.next()
        images = corpus.images[idx]
        mask = nn.random_mask(meta, mask_ratio, mask_rng, len(idx))
        recon = nn.forward_ssl(model, images, mask)
        loss = nn.masked_mse(recon, nn.patchify(meta, images), mask)
        opt.zero_grad()
        nx.backward(loss)
        opt.step()
        history.append(loss.item())
    model.set_trainable(())
    return model, history


def ssl_eval_loss(model: ModelState, images: np.ndarray, seed: int, mask_ratio: float = 0.6, draws: int = 4) -> float:
    """Mean masked MSE over a fixed set of mask draws."""
    rng = Rng(seed, "ssl_eval")
    patches = nn.patchify(model.meta, images)
    vals = []
    with nx.no_grad():
        for _ in range(draws):
            mask = nn.random_mask(model.meta, mask_ratio, rng, len(images))
            vals.append(nn.masked_mse(nn.forward_ssl(model, images, mask), patches, mask).item())
    return float(np.mean(vals))


def mds_select(
    m0: ModelState | None,
    task: TaskDataset,
    k: int,
    runs: int,
    seed: int,
    scores: np.ndarray | None = None,
) -> list[BufferEntry]:
    """The ``k`` training samples with lowest average SSL loss under M_0 (ties: lower index)."""
    if k > task.spec.n_train:
        raise ConfigError(f"K={k} exceeds train size {task.spec.n_train} of {task.task_id}")
    if scores is None:
        scores = data.ssl_scores(m0, task, runs, seed)
    order = np.lexsort((np.arange(scores.size), scores))[:k]
    return [BufferEntry(task.task_id, int(i), float(scores[i])) for i in sorted(order)]


def random_select(task: TaskDataset, k: int, seed: int, scores: np.ndarray | None = None) -> list[BufferEntry]:
    if k > task.spec.n_train:
        raise ConfigError(f"K={k} exceeds train size {task.spec.n_train} of {task.task_id}")
    pick = np.sort(Rng(seed, "random_buffer", task.task_id).permutation(task.spec.n_train)[:k])
    return [BufferEntry(task.task_id, int(i), float(scores[i]) if scores is not None else None) for i in pick]


@dataclasses.dataclass
class FftHistory:
    seg: list[float]
    kd: list[float]


def kd_fft(
    model: ModelState,
    task: TaskDataset,
    cfg: PipelineConfig,
    seed: int,
    buffer: Buffer | None = None,
    teacher: ModelState | None = None,
) -> tuple[ModelState, FftHistory]:
    """Full fine-tuning on ``task``; with a buffer and teacher, interleaved KD steps.

    Segmentation steps update encoder, decoder and head. KD steps (every
    ``kd_every`` iterations) update the encoder alone against the frozen
    teacher's features on buffer samples. The inputs are not modified.
    """
    if task.spec.n_train < 1:
        raise ConfigError(f"{task.task_id} has no training data")
    use_kd = buffer is not None and len(buffer) > 0 and teacher is not None
    model = model.copy()
    model.set_trainable(("encoder", "decoder", "seg_head"))
    # the mask token only takes part in SSL forwards
    encoder = {k: v for k, v in model.group("encoder").items() if k != "encoder.mask_token"}
    seg_params = {**encoder, **model.group("decoder"), **model.group("seg_head")}
    opt_seg = AdamW(seg_params, cfg.lr_fft, weight_decay=cfg.weight_decay)
    opt_kd = AdamW(encoder, cfg.lr_kd, weight_decay=cfg.weight_decay) if use_kd else None
    rng = Rng(seed, "fft")
    batches = _Batches(task.train_idx, cfg.batch, rng.child("seg"))
    kd_rng = rng.child("kd")
    hist = FftHistory([], [])
    for it in range(cfg.iters_fft):
        idx = batches.next()
        logits = nn.forward_segmentation(model, task.images[idx], task.classes)
        loss = losses.seg_loss(logits, task.masks[idx])
        opt_seg.zero_grad()
        nx.backward(loss.total)
        opt_seg.step()
        hist.seg.append(loss.item())
        if use_kd and (it + 1) % cfg.kd_every == 0:
            images = data.stack_images(data.buffer_batch(buffer, cfg.kd_batch, kd_rng, cfg.buffer_policy))
            with nx.no_grad():
                target = nn.forward_features(teacher, images)
            kd = losses.kd_loss(nn.forward_features(model, images), target)
            opt_kd.zero_grad()
            nx.backward(kd)
            opt_kd.step()
            hist.kd.append(kd.item())
    model.set_trainable(())
    return model, hist


def lora_kd(
    e_prev: ModelState,
    e_mid: ModelState,
    task: TaskDataset,
    rank: int,
    iters: int,
    lr: float,
    seed: int,
    batch: int = 8,
    scale: float = 1.0,
) -> tuple[lora.AdaptedEncoder, list[float]]:
    """Distil E_mid's features into adapters on a frozen copy of E_prev."""
    if nn.encoder_linear_layers(e_prev.meta) != nn.encoder_linear_layers(e_mid.meta) or {
        k: v.shape for k, v in e_prev.group("encoder").items()
    } != {k: v.shape for k, v in e_mid.group("encoder").items()}:
        raise ConfigError("teacher encoders have different architectures")
    adapted = lora.inject(_freeze(e_prev), rank, seed, scale)
    opt = AdamW(adapted.trainable(), lr)
    images = task.images[task.train_idx]
    with nx.no_grad():
        targets = nn.forward_features(e_mid, images).values.data.reshape(len(images), e_mid.meta.tokens, -1)
    batches = _Batches(np.arange(len(images)), batch, Rng(seed, "lora_kd"))
    history = []
    for _ in range(iters):
        idx = batches.next()
        student = lora.adapted_forward(adapted, images[idx])
        target = Tensor(targets[idx].reshape(-1, targets.shape[-1]))
        loss = losses.refine_loss(student, target)
        opt.zero_grad()
        nx.backward(loss)
        opt.step()
        history.append(loss.item())
    return adapted, history


def refine_gap(adapted: lora.AdaptedEncoder, e_mid: ModelState, images: np.ndarray) -> float:
    with nx.no_grad():
        return losses.refine_loss(lora.adapted_forward(adapted, images), nn.forward_features(e_mid, images)).item()


def reparameterize(adapted: lora.AdaptedEncoder, m_mid: ModelState) -> ModelState:
    """M_t: merged encoder, every other tensor copied from M_mid."""
    merged = lora.merge(adapted)
    params = {k: (merged[k] if k in merged else Tensor(v.data.copy(), name=k)) for k, v in m_mid.params.items()}
    return ModelState(m_mid.meta, params)


def calibrate_decoder(model: ModelState, task: TaskDataset, cfg: PipelineConfig, seed: int) -> ModelState:
    """Optional decoder+head refit on top of a fixed encoder."""
    model = model.copy()
    model.set_trainable(("decoder", "seg_head"))
    opt = AdamW({**model.group("decoder"), **model.group("seg_head")}, cfg.lr_fft)
    batches = _Batches(task.train_idx, cfg.batch, Rng(seed, "calibrate"))
    for _ in range(cfg.iters_calibrate):
        idx = batches.next()
        loss = losses.seg_loss(nn.forward_segmentation(model, task.images[idx]), task.masks[idx])
        opt.zero_grad()
        nx.backward(loss.total)
        opt.step()
    model.set_trainable(())
    return model


# --- orchestration -----------------------------------------------------------------
@dataclasses.dataclass
class TaskRecord:
    task_id: str
    m_init: str
    m_mid: str
    m_final: str
    adapters: str | None
    teacher_hash_before: str | None
    teacher_hash_after: str | None
    mid_hash_before: str | None
    mid_hash_after: str | None
    buffer_after: list[dict]
    refine_init: float | None = None
    refine_final: float | None = None
    kd_final: float | None = None
    seconds: float = 0.0


@dataclasses.dataclass
class RunReport:
    strategy: str
    seed: int
    tasks: list[TaskRecord]
    final: list[metrics.EvalResult]
    mid: list[metrics.EvalResult]
    transfer: metrics.TransferMatrix
    models: list[ModelState] = dataclasses.field(repr=False, default_factory=list)
    mids: list[ModelState] = dataclasses.field(repr=False, default_factory=list)
    m0: ModelState | None = dataclasses.field(repr=False, default=None)
    adapters: list[dict[str, Tensor] | None] = dataclasses.field(repr=False, default_factory=list)

    @property
    def mean_final_dice(self) -> float:
        return float(np.mean([r.mean_dice for r in self.final]))

    @property
    def mean_mid_dice(self) -> float:
        return float(np.mean([r.mean_dice for r in self.mid]))

    def metric_rows(self) -> list[tuple]:
        rows = []
        ids = [t.task_id for t in self.tasks]
        for t, tid in enumerate(ids):
            final, mid = self.final[t], self.mid[t]
            rows.append((self.strategy, tid, tid, FINAL_TAG, final.mean_dice, final.mean_hd95, self.seed))
            rows.append((self.strategy, tid, tid, MID_TAG, mid.mean_dice, mid.mean_hd95, self.seed))
            for s in range(t):
                dice, hd = self.transfer.dice[t][s], self.transfer.hd95[t][s]
                rows.append((self.strategy, tid, ids[s], FINAL_TAG, dice, hd, self.seed))
        return rows


class Context:
    """Datasets, M_0 and scores shared by every strategy of one seed."""

    def __init__(self, cfg: PipelineConfig, store: StageStore, m0: ModelState | None = None):
        self.store = store
        self.seed = cfg.master_seed
        self.tasks = [data.generate_task(dataclasses.replace(s, seed=cfg.master_seed)) for s in cfg.tasks]
        corpus_spec = data.pretrain_corpus_spec(cfg.master_seed, cfg.pretrain_corpus)
        self.corpus = data.generate_task(corpus_spec)
        if m0 is not None:
            self.m0 = m0
            self.m0_key = "m0-" + model_hash(m0)[:20]
        else:
            self.m0, self.m0_key = self._pretrained(cfg, corpus_spec)
        self._scores: dict[str, np.ndarray] = {}
        self._mds_runs = cfg.mds_runs

    def _pretrained(self, cfg: PipelineConfig, corpus_spec: TaskSpec) -> tuple[ModelState, str]:
        pre_seed = stage_seed(cfg.master_seed, "pretrain")
        key = "pretrain-" + _digest(
            [cfg.to_dict()["arch"], corpus_spec.to_dict(), cfg.iters_pretrain, cfg.lr_pretrain, cfg.batch,
             cfg.mask_ratio, cfg.weight_decay, pre_seed]
        )[:20]
        arrays = self.store.get(key)
        if arrays is None:
            t0 = time.perf_counter()
            m0, _ = pretrain_ssl(
                cfg.arch, self.corpus, cfg.iters_pretrain, pre_seed, cfg.lr_pretrain, cfg.batch, cfg.mask_ratio,
                cfg.weight_decay,
            )
            self.store.put(key, m0.params)
            log.info("pretrained M_0 in %.1fs", time.perf_counter() - t0)
            arrays = self.store.get(key)
        return _model_from(cfg.arch, arrays), key

    def scores(self, task: TaskDataset) -> np.ndarray:
        if task.task_id not in self._scores:
            key = "mds-" + _digest([self.m0_key, task.spec.to_dict(), self._mds_runs, self.seed])[:20]
            cached = self.store.get_json(key)
            if cached is None:
                t0 = time.perf_counter()
                cached = data.ssl_scores(self.m0, task, self._mds_runs, self.seed).tolist()
                self.store.put_json(key, cached)
                log.info("scored %s (%d runs) in %.1fs", task.task_id, self._mds_runs, time.perf_counter() - t0)
            self._scores[task.task_id] = np.asarray(cached, dtype=np.float64)
        return self._scores[task.task_id]


def _cached_model(store: StageStore, key: str, meta: ArchMeta, build: Callable[[], ModelState]) -> ModelState:
    arrays = store.get(key)
    if arrays is None:
        store.put(key, build().params)
        arrays = store.get(key)
    return _model_from(meta, arrays)


def run_sequence(cfg: PipelineConfig, store: StageStore | None = None, ctx: Context | None = None) -> RunReport:
    """Run one strategy over the whole task sequence."""
    cfg.validate()
    store = store or StageStore()
    ctx = ctx or Context(cfg, store)
    chain, buffer_source, use_lora = STRATEGIES[cfg.strategy]
    train_cfg = [cfg.iters_fft, cfg.lr_fft, cfg.lr_kd, cfg.batch, cfg.kd_batch, cfg.kd_every, cfg.weight_decay,
                 cfg.buffer_policy]
    lora_cfg = [cfg.lora_rank, cfg.lora_scale, cfg.iters_lora_kd, cfg.lr_lora, cfg.batch]
    buffer = Buffer(cfg.k)
    prev = ctx.m0
    records, models, mids, adapter_sets = [], [], [], []
    for t, task in enumerate(ctx.tasks):
        t0 = time.perf_counter()
        base = prev if chain else ctx.m0
        start = base.copy()
        nn.reinit_seg_head(start, task.classes, stage_seed(cfg.master_seed, "head", t))
        start_hash = model_hash(start)
        teacher = _freeze(prev) if (buffer_source and len(buffer)) else None
        buf_rows = buffer.to_json() if teacher is not None else []
        teacher_before = model_hash(teacher) if teacher is not None else None
        fft_seed = stage_seed(cfg.master_seed, "fft", t)
        key = "mid-" + _digest([start_hash, task.spec.to_dict(), train_cfg, fft_seed,
                                buf_rows, teacher_before, cfg.master_seed])[:20]
        hist_box = {}

        def build_mid():
            m, hist = kd_fft(start, task, cfg, fft_seed, buffer if teacher is not None else None, teacher)
            hist_box["h"] = hist
            return m

        m_mid = _cached_model(store, key, start.meta, build_mid)
        teacher_after = model_hash(teacher) if teacher is not None else None
        record = TaskRecord(task.task_id, start_hash, model_hash(m_mid), "", None, teacher_before, teacher_after,
                            None, None, [])
        if "h" in hist_box and hist_box["h"].kd:
            record.kd_final = float(np.mean(hist_box["h"].kd[-20:]))
        if use_lora:
            e_prev = _freeze(prev)
            e_mid = _freeze(m_mid)
            record.teacher_hash_before = model_hash(e_prev)
            record.mid_hash_before = model_hash(e_mid)
            lseed = stage_seed(cfg.master_seed, "lora", t)
            akey = "lora-" + _digest([record.teacher_hash_before, record.mid_hash_before, task.spec.to_dict(),
                                      lora_cfg, lseed])[:20]
            adapted = lora.inject(e_prev, cfg.lora_rank, lseed, cfg.lora_scale)
            arrays = store.get(akey)
            if arrays is None:
                adapted, _ = lora_kd(e_prev, e_mid, task, cfg.lora_rank, cfg.iters_lora_kd, cfg.lr_lora, lseed,
                                     cfg.batch, cfg.lora_scale)
                store.put(akey, lora.adapter_params(adapted))
            else:
                lora.load_adapters(adapted, arrays)
            imgs = task.images[task.train_idx]
            record.refine_init = refine_gap(lora.inject(e_prev, cfg.lora_rank, lseed, cfg.lora_scale), e_mid, imgs)
            record.refine_final = refine_gap(adapted, e_mid, imgs)
            record.teacher_hash_after = model_hash(e_prev)
            record.mid_hash_after = model_hash(e_mid)
            record.adapters = ckpt.params_hash(lora.adapter_params(adapted))
            m_final = reparameterize(adapted, m_mid)
            adapter_sets.append(lora.adapter_params(adapted))
        else:
            m_final = m_mid
            adapter_sets.append(None)
        if cfg.calibrate_decoder:
            m_final = calibrate_decoder(m_final, task, cfg, stage_seed(cfg.master_seed, "calibrate", t))
        record.m_final = model_hash(m_final)
        if buffer_source == "mds":
            buffer.add(task, mds_select(None, task, cfg.k, cfg.mds_runs, ctx.seed, ctx.scores(task)))
        elif buffer_source == "random":
            buffer.add(task, random_select(task, cfg.k, stage_seed(cfg.master_seed, "random", t)))
        record.buffer_after = buffer.to_json()
        record.seconds = time.perf_counter() - t0
        log.info("%s seed=%d %s done in %.1fs", cfg.strategy, cfg.master_seed, task.task_id, record.seconds)
        records.append(record)
        models.append(m_final)
        mids.append(m_mid)
        prev = m_final
    final = [metrics.evaluate(m, task) for m, task in zip(models, ctx.tasks)]
    mid = [metrics.evaluate(m, task) for m, task in zip(mids, ctx.tasks)]
    transfer = metrics.transfer_matrix(models, ctx.tasks)
    return RunReport(cfg.strategy, cfg.master_seed, records, final, mid, transfer, models, mids, ctx.m0, adapter_sets)


def format_metric_rows(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for strategy, tid, eid, tag, dice, hd, seed in rows:
        w.writerow([strategy, tid, eid, tag, f"{dice:.6f}", f"{hd:.6f}", seed])
    return buf.getvalue()


def parse_metric_rows(text: str) -> list[tuple]:
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header != METRICS_HEADER:
        raise ConfigError(f"unexpected metrics header {','.join(header)}")
    return [(s, t, e, tag, float(d), float(h), int(seed)) for s, t, e, tag, d, h, seed in reader]


@dataclasses.dataclass
class Summary:
    strategy: str
    seed: str
    dice: float
    dice_mid: float
    hd95: float
    bwt: float


def summarize(rows) -> list[Summary]:
    """Per (strategy, seed) means over tasks, then a ``mean`` row per strategy.

    ``dice`` and ``hd95`` are the reported M_t scores on each task; BWT comes
    from the off-diagonal rows of the last task's model.
    """
    runs: dict[tuple[str, int], dict] = {}
    for strategy, tid, eid, tag, dice, hd, seed in rows:
        run = runs.setdefault((strategy, seed), {"order": [], "diag": {}, "mid": {}, "grid": {}})
        if tid == eid and tag == FINAL_TAG:
            run["order"].append(tid)
            run["diag"][tid] = (dice, hd)
        elif tid == eid and tag == MID_TAG:
            run["mid"][tid] = dice
        else:
            run["grid"][(tid, eid)] = dice
    out: list[Summary] = []
    by_strategy: dict[str, list[Summary]] = {}
    for (strategy, seed), run in runs.items():
        order = run["order"]
        last = order[-1]
        bwt = [run["grid"][(last, s)] - run["diag"][s][0] for s in order[:-1]]
        row = Summary(
            strategy,
            str(seed),
            float(np.mean([run["diag"][t][0] for t in order])),
            float(np.mean([run["mid"][t] for t in order])),
            float(np.mean([run["diag"][t][1] for t in order])),
            float(np.mean(bwt)) if bwt else 0.0,
        )
        by_strategy.setdefault(strategy, []).append(row)
    for strategy, seeds in by_strategy.items():
        out += seeds
        out.append(
            Summary(strategy, "mean", *(float(np.mean([getattr(r, f) for r in seeds])) for f in ("dice", "dice_mid", "hd95", "bwt")))
        )
    return out


def format_summary(rows: list[Summary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("strategy", "seed", "dice", "dice_mid", "hd95", "bwt"))
    for r in rows:
        w.writerow([r.strategy, r.seed, f"{r.dice:.6f}", f"{r.dice_mid:.6f}", f"{r.hd95:.6f}", f"{r.bwt:.6f}"])
    return buf.getvalue()


# --- experiments ----------------------------------------------------------------------
@dataclasses.dataclass
class Experiment:
    """One pipeline config crossed with a strategy list and a seed list."""

    config: PipelineConfig
    strategies: list[str]
    seeds: list[int]

    def validate(self) -> None:
        if not self.strategies or not self.seeds:
            raise ConfigError("an experiment needs at least one strategy and one seed")
        if len(set(self.strategies)) != len(self.strategies) or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("strategies and seeds must not repeat")
        for strategy in self.strategies:
            self.run_config(strategy, self.seeds[0]).validate()

    def runs(self) -> list[tuple[str, int]]:
        return [(strategy, seed) for strategy in self.strategies for seed in self.seeds]

    def run_config(self, strategy: str, seed: int) -> PipelineConfig:
        return dataclasses.replace(self.config, strategy=strategy, master_seed=int(seed))

    def to_dict(self) -> dict:
        return {**self.config.to_dict(), "strategies": list(self.strategies), "seeds": list(self.seeds)}

    @classmethod
    def from_dict(cls, d: dict) -> Experiment:
        d = dict(d)
        strategies = d.pop("strategies", None)
        seeds = d.pop("seeds", None)
        cfg = PipelineConfig.from_dict(d)
        strategies = [cfg.strategy] if strategies is None else list(strategies)
        seeds = [cfg.master_seed] if seeds is None else [int(s) for s in seeds]
        return cls(cfg, strategies, seeds)

    def digest(self) -> str:
        return _digest(self.to_dict())


def run_name(strategy: str, seed: int) -> str:
    return f"{strategy}/seed{seed}"


def save_run(report: RunReport, out_dir: Path) -> dict:
    """Write checkpoints, buffer, transfer grid and metric rows of one run."""
    rel = Path("runs") / report.strategy / f"seed{report.seed}"
    run_dir = out_dir / rel
    run_dir.mkdir(parents=True, exist_ok=True)
    checkpoints = []
    for t, rec in enumerate(report.tasks):
        stem = f"task{t + 1}_{rec.task_id}"
        files = {"mid": report.mids[t].params, "final": report.models[t].params}
        if report.adapters and report.adapters[t] is not None:
            files["adapters"] = report.adapters[t]
        for tag, params in files.items():
            ckpt.save(run_dir / f"{stem}.{tag}.sqft", params)
            checkpoints.append(str(rel / f"{stem}.{tag}.sqft"))
    (run_dir / "buffer.json").write_text(json.dumps(report.tasks[-1].buffer_after, indent=1) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model_t", "task_s", "dice", "hd95"))
    for t, s, dice, hd in report.transfer.rows():
        w.writerow([t + 1, s + 1, f"{dice:.6f}", f"{hd:.6f}"])
    (run_dir / "transfer.csv").write_text(buf.getvalue())
    (run_dir / "metrics.csv").write_text(format_metric_rows(report.metric_rows()))
    stages = [dataclasses.asdict(r) for r in report.tasks]
    for st in stages:
        st.pop("buffer_after")
    return {
        "status": "complete",
        "dir": str(rel),
        "checkpoints": checkpoints,
        "stages": stages,
        "seconds": round(sum(r.seconds for r in report.tasks), 3),
    }


class Manifest:
    """``manifest.json``: config digest, completed runs, checkpoint paths, timings."""

    def __init__(self, path: Path, digest: str):
        self.path = path
        self.data = {"config_digest": digest, "created": _now(), "updated": _now(), "m0": {}, "runs": {}}

    @classmethod
    def open(cls, out_dir: Path, digest: str, resume: bool) -> Manifest:
        path = out_dir / "manifest.json"
        man = cls(path, digest)
        if path.exists():
            if not resume:
                raise ConfigError(f"{out_dir} already holds a run; pass --resume to continue it")
            old = json.loads(path.read_text())
            if old.get("config_digest") != digest:
                raise ConfigError(f"config differs from the run being resumed in {out_dir}")
            man.data = old
        return man

    def done(self, name: str, out_dir: Path) -> bool:
        entry = self.data["runs"].get(name)
        return bool(entry) and entry.get("status") == "complete" and (out_dir / entry["dir"] / "metrics.csv").exists()

    def record(self, name: str, entry: dict) -> None:
        self.data["runs"][name] = entry
        self.save()

    def save(self) -> None:
        self.data["updated"] = _now()
        tmp = self.path.with_suffix(f".{os.getpid()}.tmp")
        tmp.write_text(json.dumps(self.data, indent=1, sort_keys=True) + "\n")
        os.replace(tmp, self.path)


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _run_worker(cfg_dict: dict, out_dir: str) -> tuple[str, dict]:
    cfg = PipelineConfig.from_dict(cfg_dict)
    report = run_sequence(cfg, StageStore(Path(out_dir) / "stages"))
    return run_name(cfg.strategy, cfg.master_seed), save_run(report, Path(out_dir))


def run_experiment(exp: Experiment, out_dir: Path, resume: bool = False, workers: int = 1) -> list[tuple]:
    """Run every (strategy, seed) pair; writes metrics.csv and summary.csv under ``out_dir``."""
    exp.validate()
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest.open(out_dir, exp.digest(), resume)
    manifest.save()
    store = StageStore(out_dir / "stages")
    pending = [(s, seed) for s, seed in exp.runs() if not manifest.done(run_name(s, seed), out_dir)]
    contexts: dict[int, Context] = {}
    for seed in sorted({seed for _, seed in pending}):
        cfg = exp.run_config(exp.strategies[0], seed)
        ctx = contexts[seed] = Context(cfg, store)
        if any(STRATEGIES[s][1] == "mds" for s, sd in pending if sd == seed):
            for task in ctx.tasks:
                ctx.scores(task)
        m0_path = Path("m0") / f"seed{seed}.sqft"
        ckpt.save(out_dir / m0_path, ctx.m0.params)
        manifest.data["m0"][str(seed)] = {"path": str(m0_path), "stage": ctx.m0_key}
    manifest.save()
    if workers > 1 and len(pending) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_worker, exp.run_config(s, seed).to_dict(), str(out_dir)) for s, seed in pending]
            for fut in futures:
                manifest.record(*fut.result())
    else:
        for strategy, seed in pending:
            cfg = exp.run_config(strategy, seed)
            report = run_sequence(cfg, store, contexts[seed])
            manifest.record(run_name(strategy, seed), save_run(report, out_dir))
    rows = []
    for strategy, seed in exp.runs():
        entry = manifest.data["runs"][run_name(strategy, seed)]
        rows += parse_metric_rows((out_dir / entry["dir"] / "metrics.csv").read_text())
    (out_dir / "metrics.csv").write_text(format_metric_rows(rows))
    (out_dir / "summary.csv").write_text(format_summary(summarize(rows)))
    return rows
