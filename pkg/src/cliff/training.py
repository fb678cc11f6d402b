"""Training regimes: CLIFF (base + incremental phases) and three baselines.

CLIFF's per-batch objective on task ``m`` is

    L = L_cls + lambda_gate * L_gate + lambda_mem * L_mem + lambda_kd * L_kd

with ``L_cls`` the global-label cross entropy of current-task images,
``L_gate`` a cosine-similarity material-identification loss, ``L_mem`` the
global-label cross entropy of replayed exemplars, and ``L_kd`` a
temperature-softened distillation term against the previous task's frozen
model, restricted to the past materials' logit blocks.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .baselines import GlobalHeadClassifier, PromptPoolClassifier
from .errors import ConfigurationError, DataError
from .model import MODES, PER_MATERIAL, SINGLE, CliffModel, HeadConfig
from .synth import NUM_CLASSES, DatasetSplit, FlakeSample, MaterialProfile, augment, derive_rng, stack_images
from .tensor import Adam, Tensor, concat, cosine_similarity, kl_divergence_with_temperature, no_grad
from .tensor import softmax_cross_entropy as cross_entropy
from .vit import VitConfig

log = logging.getLogger(__name__)

Task = tuple[MaterialProfile, DatasetSplit]


@dataclass
class TrainConfig:
    epochs_base: int = 30
    epochs_incremental: int = 20
    batch_size: int = 16
    lr_base: float = 1e-3
    lr_incremental: float = 5e-3
    lambda_gate: float = 0.1
    lambda_mem: float = 1.0
    lambda_kd: float = 0.5
    kd_temperature: float = 2.0
    gate_temperature: float = 0.1
    buffer_per_task: int = 30
    replay_batch: int = 8
    seed: int = 0
    augment: bool = True
    cls_mode: str = PER_MATERIAL
    replay_mode: str = PER_MATERIAL
    l2p_pool_size: int = 8
    l2p_top_k: int = 2
    l2p_key_weight: float = 0.5

    def __post_init__(self):
        for name in ("lambda_gate", "lambda_mem", "lambda_kd", "lr_base", "lr_incremental", "l2p_key_weight"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("kd_temperature", "gate_temperature"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.buffer_per_task < NUM_CLASSES:
            raise ConfigurationError(f"buffer_per_task must be >= {NUM_CLASSES}, got {self.buffer_per_task}")
        for name in ("batch_size", "replay_batch", "l2p_pool_size", "l2p_top_k"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in ("epochs_base", "epochs_incremental"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        for name in ("cls_mode", "replay_mode"):
            if getattr(self, name) not in MODES:
                raise ConfigurationError(f"{name} must be one of {MODES}, got {getattr(self, name)!r}")
        if self.l2p_top_k > self.l2p_pool_size:
            raise ConfigurationError("l2p_top_k cannot exceed l2p_pool_size")

    def to_dict(self) -> dict:
        return asdict(self)


# -- memory buffer -------------------------------------------------------------

@dataclass(frozen=True)
class BufferEntry:
    sample: FlakeSample
    task: int


class MemoryBuffer:
    """Fixed per-task quota of class-balanced exemplars from finished tasks."""

    def __init__(self, capacity_per_task: int):
        self.capacity_per_task = int(capacity_per_task)
        self.entries: list[BufferEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def tasks(self) -> list[int]:
        return sorted({e.task for e in self.entries})

    def count(self, task: int) -> int:
        return sum(1 for e in self.entries if e.task == task)

    def add_task(self, entries: list[BufferEntry]) -> None:
        tasks = {e.task for e in entries}
        if len(tasks) > 1:
            raise DataError("add_task expects entries from a single task")
        if not entries:
            return
        task = tasks.pop()
        if task in self.tasks:
            raise DataError(f"task {task} is already stored in the buffer")
        if len(entries) > self.capacity_per_task:
            raise DataError(f"{len(entries)} exemplars exceed the per-task capacity of {self.capacity_per_task}")
        for e in entries:
            e.sample.image.setflags(write=False)
        self.entries.extend(entries)

    def sample(self, n: int, rng: np.random.Generator) -> list[BufferEntry]:
        if not self.entries:
            return []
        pick = rng.choice(len(self.entries), size=min(n, len(self.entries)), replace=False)
        return [self.entries[i] for i in pick]


def build_buffer_exemplars(
    samples: list[FlakeSample], task_index: int, k_per_class: int, seed: int = 0
) -> list[BufferEntry]:
    """Uniform random selection of ``k_per_class`` samples of every class."""
    if k_per_class < 1:
        raise ConfigurationError(f"k_per_class must be >= 1, got {k_per_class}")
    rng = derive_rng(seed, 0xB0FF, task_index)
    chosen: list[BufferEntry] = []
    for c in range(NUM_CLASSES):
        idx = [i for i, s in enumerate(samples) if s.thickness_class == c]
        if not idx:
            raise DataError(f"task {task_index} has no samples of class {c}")
        pick = sorted(rng.choice(len(idx), size=min(k_per_class, len(idx)), replace=False))
        chosen.extend(
            BufferEntry(_copy_sample(samples[idx[p]]), task_index) for p in pick
        )
    return chosen


def _copy_sample(s: FlakeSample) -> FlakeSample:
    return FlakeSample(s.image.copy(), s.thickness_class, s.material_id, s.material_name)


def exemplars_for_quota(samples, task_index: int, quota: int, seed: int) -> list[BufferEntry]:
    """Split a per-task quota across classes (remainder to the lowest classes)."""
    q, r = divmod(quota, NUM_CLASSES)
    entries = build_buffer_exemplars(samples, task_index, q + (1 if r else 0), seed)
    keep, per_class = [], [q + (1 if c < r else 0) for c in range(NUM_CLASSES)]
    for e in entries:
        if per_class[e.sample.thickness_class] > 0:
            per_class[e.sample.thickness_class] -= 1
            keep.append(e)
    return keep


# -- loss pieces ---------------------------------------------------------------

def gate_loss(z: Tensor, material: int, embeddings: Tensor, projection, temperature: float) -> Tensor:
    """Cross entropy of cosine(proj(z), e_i) / temperature against ``material``.

    Only ``embeddings[material]`` receives gradient; the other rows are
    detached.
    """
    m_count = embeddings.shape[0]
    if not 0 <= material < m_count:
        raise IndexError(f"material {material} out of range for {m_count} embeddings")
    rows = [embeddings[i].reshape(1, -1) if i == material else embeddings[i].detach().reshape(1, -1)
            for i in range(m_count)]
    table = concat(rows, axis=0)
    q = projection(z)
    if q.ndim == 1:
        q = q.reshape(1, -1)
    logits = cosine_similarity(q.reshape(q.shape[0], 1, -1), table.reshape(1, m_count, -1)).scale(1.0 / temperature)
    return cross_entropy(logits, np.full(q.shape[0], material))


def _zero() -> Tensor:
    return Tensor(np.float32(0.0))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def _images(samples, rng, do_augment: bool) -> np.ndarray:
    if do_augment:
        samples = [augment(s, rng) for s in samples]
    return stack_images(samples)


# -- CLIFF ---------------------------------------------------------------------

class CliffTrainer:
    """Runs the CLIFF schedule on a sequence of material tasks.

    ``after_add_material(model, index)`` is called right after each new
    material's components are created, before any of them is trained.
    """

    def __init__(
        self,
        model: CliffModel,
        config: TrainConfig,
        after_add_material: Callable[[CliffModel, int], None] | None = None,
    ):
        self.model = model
        self.config = config
        self.buffer = MemoryBuffer(config.buffer_per_task)
        self.teacher: CliffModel | None = None
        self.history: list[dict] = []
        self.after_add_material = after_add_material
        self._rng = derive_rng(config.seed, 0x7EA1)

    # individual loss terms -----------------------------------------------
    def replay_logits(self, model: CliffModel, images: np.ndarray, tasks: np.ndarray) -> Tensor:
        mode = self.config.replay_mode
        if mode == PER_MATERIAL:
            return model.global_logits(images, PER_MATERIAL)
        # single_prompt: every replayed image uses its own material's prompt
        out: list[Tensor | None] = [None] * len(images)
        pieces, positions = [], []
        for t in np.unique(tasks):
            sel = np.flatnonzero(tasks == t)
            pieces.append(model.global_logits(images[sel], SINGLE, int(t)))
            positions.append(sel)
        stacked = concat(pieces, axis=0)
        inverse = np.argsort(np.concatenate(positions), kind="stable")
        return stacked[inverse]

    def loss_terms(
        self, images: np.ndarray, labels: np.ndarray, replay: list[BufferEntry] | None = None
    ) -> dict[str, Tensor]:
        """Every term of the objective for one batch of the current task."""
        model, cfg = self.model, self.config
        m = model.num_materials - 1
        c = model.num_classes
        base = model.base_logits(images)
        z = model.features(images, m)
        if cfg.cls_mode == SINGLE:
            blocks = [base + model.delta(images, i, z) for i in range(m)]
        else:
            blocks = [base + model.delta(images, i) for i in range(m)]
        logits = concat(blocks + [base + model.delta(images, m, z)], axis=-1)
        terms = {"cls": cross_entropy(logits, m * c + labels)}
        terms["gate"] = gate_loss(
            z, m, model.embeddings.table(), model.gate_projections[m], cfg.gate_temperature
        )
        terms["mem"] = _zero()
        terms["kd"] = _zero()
        if replay and m > 0:
            r_images = stack_images([e.sample for e in replay])
            r_tasks = np.array([e.task for e in replay])
            r_labels = np.array([e.sample.thickness_class for e in replay])
            student = self.replay_logits(model, r_images, r_tasks)
            terms["mem"] = cross_entropy(student, r_tasks * c + r_labels)
            if self.teacher is not None:
                with no_grad():
                    teacher = self.replay_logits(self.teacher, r_images, r_tasks)
                terms["kd"] = kl_divergence_with_temperature(student[:, : m * c], teacher, cfg.kd_temperature)
        return terms

    def total_loss(self, terms: dict[str, Tensor]) -> Tensor:
        cfg = self.config
        return (
            terms["cls"]
            + terms["gate"].scale(cfg.lambda_gate)
            + terms["mem"].scale(cfg.lambda_mem)
            + terms["kd"].scale(cfg.lambda_kd)
        )

    # phases ------------------------------------------------------------------
    def _record(self, **row) -> None:
        self.history.append(row)
        log.debug("%s", row)

    def fit_base(self, split: DatasetSplit, name: str) -> None:
        """Train backbone and base head on the reference material, then freeze."""
        if not split.train:
            raise DataError("base phase needs a non-empty training set")
        self.train_base_head(split)
        self.model.freeze_base()
        self._start_material(name)
        self._fit_material(split, task=0)
        self._finish_task(split, task=0)

    def train_base_head(self, split: DatasetSplit) -> None:
        model, cfg = self.model, self.config
        model.backbone.unfreeze()
        model.base_head.unfreeze()
        params = model.backbone.parameters() + model.base_head.parameters()
        opt = Adam(params, lr=cfg.lr_base)
        labels = np.array([s.thickness_class for s in split.train])
        for epoch in range(cfg.epochs_base):
            losses, correct = [], 0
            for idx in _batches(len(split.train), cfg.batch_size, self._rng):
                x = _images([split.train[i] for i in idx], self._rng, cfg.augment)
                logits = model.base_logits(x)
                loss = cross_entropy(logits, labels[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss.data))
                correct += int((logits.data.argmax(-1) == labels[idx]).sum())
            self._record(phase="base", task=0, epoch=epoch, loss=float(np.mean(losses)),
                         cls=float(np.mean(losses)), gate=0.0, mem=0.0, kd=0.0,
                         train_acc=100.0 * correct / len(split.train))

    def fit_task(self, split: DatasetSplit, name: str) -> None:
        """Learn a new material's prompt, embedding and delta head."""
        if not split.train:
            raise DataError(f"task {name!r} has no training samples")
        task = self.model.num_materials
        if task > 0 and self.teacher is None and self.config.lambda_kd > 0:
            raise ConfigurationError("distillation is enabled but no teacher snapshot exists")
        if task > 0 and len(self.buffer) == 0 and self.config.lambda_mem > 0:
            raise ConfigurationError("replay is enabled but the memory buffer is empty")
        self._start_material(name)
        self._fit_material(split, task)
        self._finish_task(split, task)

    def _start_material(self, name: str) -> None:
        m = self.model.add_material(name)
        if self.after_add_material is not None:
            self.after_add_material(self.model, m)

    def _fit_material(self, split: DatasetSplit, task: int) -> None:
        model, cfg = self.model, self.config
        opt = Adam(model.material_parameters(task), lr=cfg.lr_incremental)
        labels = np.array([s.thickness_class for s in split.train])
        use_replay = task > 0 and (cfg.lambda_mem > 0 or cfg.lambda_kd > 0)
        for epoch in range(cfg.epochs_incremental):
            sums = {"loss": 0.0, "cls": 0.0, "gate": 0.0, "mem": 0.0, "kd": 0.0}
            batches = 0
            for idx in _batches(len(split.train), cfg.batch_size, self._rng):
                x = _images([split.train[i] for i in idx], self._rng, cfg.augment)
                replay = None
                if use_replay:
                    replay = self.buffer.sample(cfg.replay_batch, self._rng)
                    if cfg.augment:
                        replay = [BufferEntry(augment(e.sample, self._rng), e.task) for e in replay]
                terms = self.loss_terms(x, labels[idx], replay)
                loss = self.total_loss(terms)
                opt.zero_grad()
                loss.backward()
                opt.step()
                batches += 1
                sums["loss"] += float(loss.data)
                for k in ("cls", "gate", "mem", "kd"):
                    sums[k] += float(terms[k].data)
            row = {k: v / max(batches, 1) for k, v in sums.items()}
            self._record(phase="incremental", task=task, epoch=epoch, train_acc=float("nan"), **row)

    def _finish_task(self, split: DatasetSplit, task: int) -> None:
        self.buffer.add_task(exemplars_for_quota(split.train, task, self.config.buffer_per_task, self.config.seed))
        self.teacher = self.model.snapshot()


def new_cliff_model(config: TrainConfig, vit_config: VitConfig | None = None,
                    head_config: HeadConfig | None = None) -> CliffModel:
    return CliffModel(vit_config or VitConfig(), head_config or HeadConfig(), seed=int(derive_rng(config.seed, 0x30DE).integers(2**31)))


def train_base(model: CliffModel, task0: Task, config: TrainConfig) -> CliffTrainer:
    trainer = CliffTrainer(model, config)
    trainer.fit_base(task0[1], task0[0].name)
    return trainer


def train_incremental(trainer: CliffTrainer, task: Task) -> CliffTrainer:
    trainer.fit_task(task[1], task[0].name)
    return trainer


@dataclass
class SequenceResult:
    """Models after each training step (copies), plus the training history."""

    method: str
    task_names: list[str]
    models: list = field(default_factory=list)
    history: list[dict] = field(default_factory=list)


def run_cliff(
    tasks: list[Task],
    config: TrainConfig,
    vit_config: VitConfig | None = None,
    head_config: HeadConfig | None = None,
    on_step: Callable[[int, CliffModel], None] | None = None,
    after_add_material: Callable[[CliffModel, int], None] | None = None,
    keep_models: bool = True,
) -> SequenceResult:
    import copy

    model = new_cliff_model(config, vit_config, head_config)
    trainer = CliffTrainer(model, config, after_add_material)
    result = SequenceResult("cliff", [p.name for p, _ in tasks])
    for s, (profile, split) in enumerate(tasks):
        if s == 0:
            trainer.fit_base(split, profile.name)
        else:
            trainer.fit_task(split, profile.name)
        if keep_models:
            result.models.append(copy.deepcopy(model))
        if on_step is not None:
            on_step(s, model)
    result.history = trainer.history
    result.trainer = trainer
    return result


# -- baselines -------------------------------------------------------------------

def _fit_global(model, params, samples, targets, epochs, lr, cfg, rng, history, phase, task, extra_loss=None):
    opt = Adam(params, lr=lr)
    for epoch in range(epochs):
        total, correct = 0.0, 0
        batches = 0
        for idx in _batches(len(samples), cfg.batch_size, rng):
            x = _images([samples[i] for i in idx], rng, cfg.augment)
            loss, logits = extra_loss(x, targets[idx]) if extra_loss else _global_ce(model, x, targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data)
            batches += 1
            correct += int((logits.data.argmax(-1) == targets[idx]).sum())
        history.append({"phase": phase, "task": task, "epoch": epoch, "loss": total / max(batches, 1),
                        "cls": total / max(batches, 1), "gate": 0.0, "mem": 0.0, "kd": 0.0,
                        "train_acc": 100.0 * correct / len(samples)})


def _global_ce(model, x, targets):
    logits = model.global_logits(x)
    return cross_entropy(logits, targets), logits


def _model_seed(config: TrainConfig) -> int:
    return int(derive_rng(config.seed, 0x30DE).integers(2**31))


def train_naive_finetune(
    tasks: list[Task], config: TrainConfig, vit_config: VitConfig | None = None,
    on_step: Callable[[int, GlobalHeadClassifier], None] | None = None,
) -> SequenceResult:
    """Sequential full fine-tuning with cross entropy only."""
    import copy

    model = GlobalHeadClassifier(vit_config or VitConfig(), seed=_model_seed(config))
    rng = derive_rng(config.seed, 0x7EA1)
    result = SequenceResult("naive", [p.name for p, _ in tasks])
    for t, (profile, split) in enumerate(tasks):
        model.add_material(profile.name)
        model.unfreeze()
        targets = np.array([t * NUM_CLASSES + s.thickness_class for s in split.train])
        epochs = config.epochs_base if t == 0 else config.epochs_incremental
        _fit_global(model, model.parameters(), split.train, targets, epochs, config.lr_base, config, rng,
                    result.history, "naive", t)
        result.models.append(copy.deepcopy(model))
        if on_step is not None:
            on_step(t, model)
    return result


def train_joint(
    tasks: list[Task], config: TrainConfig, vit_config: VitConfig | None = None,
    on_step: Callable[[int, GlobalHeadClassifier], None] | None = None,
) -> SequenceResult:
    """One training phase over the union of all tasks (upper bound)."""
    model = GlobalHeadClassifier(vit_config or VitConfig(), seed=_model_seed(config))
    rng = derive_rng(config.seed, 0x7EA1)
    samples, targets = [], []
    for t, (profile, split) in enumerate(tasks):
        model.add_material(profile.name)
        samples.extend(split.train)
        targets.extend(t * NUM_CLASSES + s.thickness_class for s in split.train)
    result = SequenceResult("joint", [p.name for p, _ in tasks])
    _fit_global(model, model.parameters(), samples, np.array(targets), config.epochs_base, config.lr_base,
                config, rng, result.history, "joint", -1)
    result.models.append(model)
    if on_step is not None:
        on_step(0, model)
    return result


def train_l2p_baseline(
    tasks: list[Task], config: TrainConfig, vit_config: VitConfig | None = None,
    head_config: HeadConfig | None = None,
    on_step: Callable[[int, PromptPoolClassifier], None] | None = None,
) -> SequenceResult:
    """Shared prompt pool over a backbone frozen after the reference-material phase.

    The backbone comes from the same base phase CLIFF runs (same seed, same
    data), so both methods start from identical features.
    """
    import copy

    head_config = head_config or HeadConfig()
    base = new_cliff_model(config, vit_config, head_config)
    CliffTrainer(base, config).train_base_head(tasks[0][1])
    base.freeze_base()
    model = PromptPoolClassifier(base.backbone, config.l2p_pool_size, config.l2p_top_k,
                                 head_config.prompt_length, seed=_model_seed(config))
    rng = derive_rng(config.seed, 0x12F0)
    result = SequenceResult("l2p", [p.name for p, _ in tasks])
    for t, (profile, split) in enumerate(tasks):
        model.add_material(profile.name)
        targets = np.array([t * NUM_CLASSES + s.thickness_class for s in split.train])

        def loss_fn(x, y, t=t):
            z, sims, idx = model.forward_features(x)
            logits = model.head(z)
            loss = cross_entropy(logits, y) + model.key_pull(sims, idx).scale(config.l2p_key_weight)
            return loss, logits

        params = [model.keys, model.prompts] + [p for blk in model.head_blocks for p in blk.parameters()]
        _fit_global(model, params, split.train, targets, config.epochs_incremental, config.lr_incremental,
                    config, rng, result.history, "l2p", t, extra_loss=loss_fn)
        result.models.append(copy.deepcopy(model))
        if on_step is not None:
            on_step(t, model)
    return result


TRAINERS = {
    "cliff": run_cliff,
    "naive": train_naive_finetune,
    "joint": train_joint,
    "l2p": train_l2p_baseline,
}


HISTORY_FIELDS = ("phase", "task", "epoch", "loss", "cls", "gate", "mem", "kd", "train_acc")


def write_history(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
