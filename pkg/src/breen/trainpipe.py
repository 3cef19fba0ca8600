"""Three-stage trainer: freeze policies, AdamW, batching, checkpoints, metrics."""

from __future__ import annotations

import collections
import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from breen import numcore as nc
from breen.losses import LossBreakdown, objective
from breen.model import BreenConfig, BreenModel, init_parameters
from breen.sequence import Stage, assemble_pretrain, assemble_sft
from breen.teacher import pool_grid

log = logging.getLogger(__name__)

CKPT_MAGIC = b"BRCK"
CKPT_VERSION = 1
HISTORY = 256

BETA1, BETA2, ADAM_EPS = 0.9, 0.95, 1e-8
WEIGHT_DECAY = 0.01
CLIP_NORM = 1.0

PREALIGN_GROUPS = ("queries", "patch_mlp", "query_proj")


class CheckpointError(ValueError):
    """Unreadable or corrupt checkpoint."""


class ConfigMismatchError(CheckpointError):
    """Checkpoint was written for a different model configuration."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, component: str, step: int):
        super().__init__(f"non-finite loss at step {step}: first NaN in {component}")
        self.component = component
        self.step = step


@dataclass
class StageSpec:
    stage: Stage
    alpha: float
    beta: float
    lr: float
    batch_size: int
    steps: int
    checkpoint_every: int = 0
    schedule: str = "constant"  # or "linear" decay to zero
    train_query_proj_in_prealign: bool = True

    def __post_init__(self):
        self.stage = Stage(self.stage)
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.schedule not in ("constant", "linear"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage"] = self.stage.value
        return d

    def lr_at(self, step: int) -> float:
        if self.schedule == "linear" and self.steps:
            return self.lr * (1.0 - step / self.steps)
        return self.lr


# lr and batch values as reported for the 7B run
PAPER_STAGES = {
    Stage.PREALIGN: StageSpec(Stage.PREALIGN, 1.0, 1.0, 4e-4, 512, 0),
    Stage.PRETRAIN: StageSpec(Stage.PRETRAIN, 1.0, 1.0, 4e-5, 512, 0),
    Stage.SFT: StageSpec(Stage.SFT, 0.5, 1.0, 4e-5, 256, 0),
}

# tuned for the d_model=64, 4-layer desk model on one CPU
DESK_STAGES = {
    Stage.PREALIGN: StageSpec(Stage.PREALIGN, 1.0, 1.0, 1e-3, 8, 300),
    Stage.PRETRAIN: StageSpec(Stage.PRETRAIN, 1.0, 1.0, 1e-3, 8, 1000, schedule="linear"),
    Stage.SFT: StageSpec(Stage.SFT, 0.5, 1.0, 1e-3, 8, 500, schedule="linear"),
}


def freeze_policy(stage, model: BreenModel | None = None, train_query_proj: bool = True) -> set[str]:
    """Names of the parameter groups that train in ``stage``.

    Pre-aligning trains only the queries, the patch projector, the image
    experts and the query projection head; later stages train everything.
    Without a model, image experts are reported as the pattern ``layers.*.image_ffn``.
    """
    stage = Stage(stage)
    if model is None:
        if stage == Stage.PREALIGN:
            base = {"queries", "patch_mlp", "layers.*.image_ffn"}
            return base | ({"query_proj"} if train_query_proj else set())
        return {"*"}
    groups = set(model.groups())
    if stage != Stage.PREALIGN:
        return groups
    wanted = set(PREALIGN_GROUPS) if train_query_proj else set(PREALIGN_GROUPS) - {"query_proj"}
    return {g for g in groups if g in wanted or g.endswith(".image_ffn")}


def trainable_names(model: BreenModel, spec: StageSpec) -> list[str]:
    groups = freeze_policy(spec.stage, model, spec.train_query_proj_in_prealign)
    return [n for n, g in ((n, g) for g, ns in model.groups().items() for n in ns) if g in groups]


@dataclass
class TrainState:
    stage: Stage
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)  # per-parameter update count for bias correction
    rng_state: dict = field(default_factory=dict)
    order: list = field(default_factory=list)
    cursor: int = 0
    history: collections.deque = field(default_factory=lambda: collections.deque(maxlen=HISTORY))

    @classmethod
    def fresh(cls, model: BreenModel, spec: StageSpec, seed: int) -> "TrainState":
        state = cls(stage=spec.stage)
        state.rng_state = np.random.Generator(np.random.PCG64([seed, list(Stage).index(spec.stage)])).bit_generator.state
        state.sync_moments(model, spec)
        return state

    def sync_moments(self, model: BreenModel, spec: StageSpec) -> None:
        """Keep moments of still-trainable parameters; zero-init newly trainable ones."""
        names = trainable_names(model, spec)
        self.m = {n: self.m.get(n, np.zeros_like(model[n].data)) for n in names}
        self.v = {n: self.v.get(n, np.zeros_like(model[n].data)) for n in names}
        self.t = {n: self.t.get(n, 0) for n in names}

    def for_stage(self, model: BreenModel, spec: StageSpec, seed: int) -> "TrainState":
        """State for the next stage: optimizer moments carried over, counters reset."""
        nxt = TrainState.fresh(model, spec, seed)
        nxt.m, nxt.v, nxt.t = dict(self.m), dict(self.v), dict(self.t)
        nxt.sync_moments(model, spec)
        return nxt


# ------------------------------------------------------------------- data


@dataclass
class PreparedSample:
    pixels: np.ndarray
    caption_ids: list
    instr_ids: list
    resp_ids: list
    targets: dict  # stride -> (n_s, D_t)


def prepare(samples, strides) -> list[PreparedSample]:
    out = []
    for s in samples:
        targets = {st: pool_grid(s.teacher, st) for st in strides}
        out.append(PreparedSample(s.pixels, list(s.caption_ids), list(s.instr_ids), list(s.resp_ids), targets))
    return out


def build_batch(model: BreenModel, batch, stage: Stage):
    """Embed a list of prepared samples into sequences plus stacked targets."""
    cfg = model.config
    pixels = np.stack([b.pixels for b in batch])
    images = pixels.astype(model["patch_mlp.w1"].dtype) / 255.0
    tokens = model.patch_embed(images)
    queries = model.query_blocks()
    seqs = []
    for i, b in enumerate(batch):
        img = nc.select(tokens, i)
        if stage == Stage.SFT:
            seqs.append(assemble_sft(img, queries, b.instr_ids, b.resp_ids, model.embed_tokens))
        else:
            seqs.append(assemble_pretrain(img, queries, b.caption_ids, model.embed_tokens, stage=stage))
    targets = {s: np.stack([b.targets[s] for b in batch]) for s in cfg.strides}
    return seqs, targets


def next_batch(state: TrainState, n: int, batch_size: int) -> np.ndarray:
    """Draw the next ``batch_size`` indices; epochs are fresh permutations from the state RNG."""
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state.rng_state
    idx = []
    while len(idx) < batch_size:
        if state.cursor >= len(state.order):
            state.order = rng.permutation(n).tolist()
            state.cursor = 0
        take = min(batch_size - len(idx), len(state.order) - state.cursor)
        idx.extend(state.order[state.cursor : state.cursor + take])
        state.cursor += take
    state.rng_state = rng.bit_generator.state
    return np.asarray(idx)


# -------------------------------------------------------------- optimizer


def _set_trainable(model: BreenModel, names) -> None:
    names = set(names)
    for n, p in model.params.items():
        p.requires_grad = n in names


def clip_gradients(grads: dict, max_norm: float = CLIP_NORM) -> float:
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for k in grads:
            grads[k] = grads[k] * np.asarray(scale, dtype=grads[k].dtype)
    return total


def adamw_update(params: dict, grads: dict, state: TrainState, lr: float) -> None:
    """In-place AdamW with decoupled weight decay on matrices only."""
    for name, g in grads.items():
        p = params[name]
        dt = p.data.dtype
        state.t[name] += 1
        t = state.t[name]
        m = state.m[name]
        v = state.v[name]
        m *= dt.type(BETA1)
        m += dt.type(1 - BETA1) * g
        v *= dt.type(BETA2)
        v += dt.type(1 - BETA2) * (g * g)
        mhat = m / dt.type(1 - BETA1**t)
        vhat = v / dt.type(1 - BETA2**t)
        if p.data.ndim >= 2:
            p.data *= dt.type(1 - lr * WEIGHT_DECAY)
        p.data -= dt.type(lr) * mhat / (np.sqrt(vhat) + dt.type(ADAM_EPS))


def _first_nan(br: LossBreakdown) -> str | None:
    for key, val in [("lm", br.lm)] + [(f"align[stride={s}]", v) for s, v in br.per_stride.items()]:
        if not np.isfinite(val):
            return key
    return None if np.isfinite(br.total) else "total"


def train_step(model: BreenModel, state: TrainState, batch, spec: StageSpec) -> LossBreakdown:
    names = list(state.m)
    _set_trainable(model, names)
    model.zero_grad()
    seqs, targets = build_batch(model, batch, spec.stage)
    out = model.forward(seqs)
    br = objective(out, targets, spec.alpha, spec.beta)
    bad = _first_nan(br)
    if bad is not None:
        raise TrainingDivergedError(bad, state.step)
    if br.tensor is not None:
        nc.backward(br.tensor)
    grads = {n: (model[n].grad if model[n].grad is not None else np.zeros_like(model[n].data)) for n in names}
    clip_gradients(grads)
    adamw_update(model.params, grads, state, spec.lr_at(state.step))
    model.zero_grad()
    state.step += 1
    state.history.append(br.total)
    return br


# ---------------------------------------------------------------- stages


def run_stage(
    model: BreenModel,
    spec: StageSpec,
    dataset,
    state: TrainState | None = None,
    seed: int = 0,
    metrics_path=None,
    checkpoint_path=None,
    callback=None,
    stop_at: int | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run ``spec.steps`` steps (resuming from ``state.step`` if given).

    ``stop_at`` ends the run early without changing the lr schedule, as an
    interrupted job would.

    Checkpoints go to ``checkpoint_path`` every ``spec.checkpoint_every``
    steps and at the end; each step appends one JSON line to ``metrics_path``.
    """
    prepared = dataset if dataset and isinstance(dataset[0], PreparedSample) else prepare(dataset, model.config.strides)
    if state is None:
        state = TrainState.fresh(model, spec, seed)
    elif state.stage != spec.stage:
        raise ConfigMismatchError(f"state is for stage {state.stage.value}, spec is {spec.stage.value}")
    records = []
    metrics = open(metrics_path, "a") if metrics_path else None
    try:
        end = spec.steps if stop_at is None else min(stop_at, spec.steps)
        while state.step < end:
            idx = next_batch(state, len(prepared), spec.batch_size)
            br = train_step(model, state, [prepared[i] for i in idx], spec)
            rec = {"step": state.step, "stage": spec.stage.value, **br.record()}
            records.append(rec)
            if metrics:
                metrics.write(json.dumps(rec) + "\n")
            if callback:
                callback(state, br)
            if checkpoint_path and spec.checkpoint_every and state.step % spec.checkpoint_every == 0:
                save_checkpoint(model, state, checkpoint_path)
    finally:
        if metrics:
            metrics.close()
    if checkpoint_path:
        save_checkpoint(model, state, checkpoint_path)
    return state, records


# ------------------------------------------------------------ evaluation


def evaluate_qa(model: BreenModel, samples, batch_size: int = 16) -> float:
    """Fraction of questions whose answer word is the argmax prediction."""
    prepared = samples if samples and isinstance(samples[0], PreparedSample) else prepare(samples, model.config.strides)
    correct = 0
    with nc.no_grad():
        for start in range(0, len(prepared), batch_size):
            batch = prepared[start : start + batch_size]
            seqs, _ = build_batch(model, batch, Stage.SFT)
            logits = model.forward(seqs).logits.data
            for i, seq in enumerate(seqs):
                pos = int(np.flatnonzero(seq.lm_labels >= 0)[0])
                correct += int(logits[i, pos - 1].argmax() == seq.lm_labels[pos])
    return correct / len(prepared)


def evaluate_loss(model: BreenModel, samples, stage, alpha=1.0, beta=1.0, batch_size=16) -> dict:
    stage = Stage(stage)
    prepared = samples if samples and isinstance(samples[0], PreparedSample) else prepare(samples, model.config.strides)
    totals = collections.defaultdict(float)
    with nc.no_grad():
        for start in range(0, len(prepared), batch_size):
            batch = prepared[start : start + batch_size]
            seqs, targets = build_batch(model, batch, stage)
            br = objective(model.forward(seqs), targets, alpha, beta)
            for k, v in br.record().items():
                totals[k] += v * len(batch)
    return {k: v / len(prepared) for k, v in totals.items()}


# ------------------------------------------------------------ checkpoints


def _state_header(state: TrainState) -> dict:
    return {
        "stage": state.stage.value,
        "step": state.step,
        "t": state.t,
        "rng_state": state.rng_state,
        "order": list(map(int, state.order)),
        "cursor": state.cursor,
        "history": [float(h) for h in state.history],
    }


def save_checkpoint(model: BreenModel, state: TrainState, path) -> None:
    arrays = [(f"param/{k}", v.data) for k, v in model.params.items()]
    arrays += [(f"m/{k}", a) for k, a in state.m.items()]
    arrays += [(f"v/{k}", a) for k, a in state.v.items()]
    index, chunks, offset = [], [], 0
    for name, a in arrays:
        raw = np.ascontiguousarray(a, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": CKPT_VERSION,
        "config": model.config.to_dict(),
        "config_hash": model.config.hash(),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "arrays": index,
        "state": _state_header(state),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hbytes)) + hbytes + payload)
    tmp.replace(path)


def read_checkpoint_header(path) -> tuple[dict, bytes]:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CKPT_VERSION}")
    try:
        header = json.loads(buf[12 : 12 + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from None
    return header, buf[12 + hlen :]


def load_checkpoint(path, expect_config: BreenConfig | None = None) -> tuple[BreenModel, TrainState]:
    header, payload = read_checkpoint_header(path)
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch (header {header['sha256']}, data {digest})")
    config = BreenConfig.from_dict(header["config"])
    if config.hash() != header["config_hash"]:
        raise CheckpointError(f"{path}: stored config hash {header['config_hash']} != recomputed {config.hash()}")
    if expect_config is not None and expect_config.hash() != header["config_hash"]:
        raise ConfigMismatchError(
            f"{path}: config hash mismatch: checkpoint {header['config_hash']}, requested {expect_config.hash()}"
        )
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
    params = {k[6:]: nc.Tensor(a, requires_grad=True) for k, a in arrays.items() if k.startswith("param/")}
    model = BreenModel(config, params)
    st = header["state"]
    state = TrainState(
        stage=Stage(st["stage"]),
        step=st["step"],
        m={k[2:]: a for k, a in arrays.items() if k.startswith("m/")},
        v={k[2:]: a for k, a in arrays.items() if k.startswith("v/")},
        t={k: int(v) for k, v in st["t"].items()},
        rng_state=st["rng_state"],
        order=st["order"],
        cursor=st["cursor"],
        history=collections.deque(st["history"], maxlen=HISTORY),
    )
    return model, state


def new_model(config: BreenConfig) -> BreenModel:
    return init_parameters(config)
