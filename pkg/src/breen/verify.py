"""Invariant suites shared by the CLI ``verify`` command and the test-suite.

Each check returns a :class:`Check`; a suite is a list of them.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

import numpy as np

from breen import numcore as nc
from breen.losses import objective
from breen.model import BreenConfig, BreenModel, init_parameters
from breen.sequence import Stage, assemble_pretrain, assemble_sft, assemble_text
from breen.teacher import pool_grid

GRAD_TOL = 1e-3
POOL_TOL = 1e-6
POOL_STRIDES = (2, 3, 4, 6, 8, 12)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


# ------------------------------------------------------------------- grad

# 14x28 pixels with 7-pixel patches -> 2x4 = 8 image tokens; a 12x12 teacher
# grid with strides 3 and 4 -> 16 + 9 query tokens
TINY = dict(
    d_model=16, n_layers=2, n_heads=2, vocab_size=12, ffn_hidden=24,
    patch=7, canvas=28, teacher_grid=12, strides=[3, 4], teacher_dim=8,
)
TINY_IMAGE = (14, 28, 3)


def tiny_problem(seed: int = 0, **overrides):
    """A float64 tiny model, a two-sample batch (caption + qa) and loss closure."""
    cfg = BreenConfig(**{**TINY, "seed": seed, **overrides})
    model = init_parameters(cfg).astype(np.float64)
    rng = np.random.default_rng(seed + 1)
    for p in model.parameters():  # break the symmetric init so every path carries gradient
        p.data = p.data + rng.standard_normal(p.data.shape) * 0.3
    images = rng.random((2,) + TINY_IMAGE)
    targets = {s: rng.standard_normal((2, cfg.query_length(s), cfg.teacher_dim)) for s in cfg.strides}
    caption = rng.integers(3, cfg.vocab_size, 5).tolist()
    instr = rng.integers(3, cfg.vocab_size, 3).tolist()
    resp = rng.integers(3, cfg.vocab_size, 2).tolist()

    def loss():
        tokens = model.patch_embed(images)
        q = model.query_blocks()
        seqs = [
            assemble_pretrain(nc.select(tokens, 0), q, caption, model.embed_tokens),
            assemble_sft(nc.select(tokens, 1), q, instr, resp, model.embed_tokens),
        ]
        return objective(model.forward(seqs), targets, 0.5, 1.0).tensor

    return model, loss


def model_gradcheck(seed: int = 0, coords: int = 24) -> dict[str, float]:
    """Max relative error per parameter group, analytic vs central differences
    on ``coords`` random entries of every parameter (all entries if fewer)."""
    with nc.precision(np.float64):
        model, loss = tiny_problem(seed)
        model.zero_grad()
        nc.backward(loss())
        rng = np.random.default_rng(seed)
        errors: dict[str, float] = {}
        for group, names in model.groups().items():
            worst = 0.0
            for name in names:
                p = model[name]
                n = p.data.size
                pick = np.arange(n) if n <= coords else rng.choice(n, coords, replace=False)
                analytic = p.grad.reshape(-1)[pick]
                numeric = nc.finite_difference_gradient(lambda _: loss().item(), p.data, coords=pick).reshape(-1)[pick]
                worst = max(worst, nc.rel_error(analytic, numeric))
            errors[group] = worst
    return errors


def suite_grad(trials: int = 20, seed: int = 0) -> list[Check]:
    checks = []
    for op, err in nc.gradcheck_suite(trials=trials, seed=seed).items():
        checks.append(Check(f"grad/op/{op}", err < GRAD_TOL, f"max rel err {err:.2e}"))
    for group, err in model_gradcheck(seed).items():
        checks.append(Check(f"grad/model/{group}", err < GRAD_TOL, f"max rel err {err:.2e}"))
    return checks


# ------------------------------------------------------------------- pool


def pool_bruteforce(grid: np.ndarray, s: int) -> np.ndarray:
    g, _, d = grid.shape
    n = g // s
    out = np.zeros((n * n, d))
    for i in range(n):
        for j in range(n):
            acc = np.zeros(d)
            for a in range(s):
                for b in range(s):
                    acc += grid[i * s + a, j * s + b]
            out[i * n + j] = acc / (s * s)
    return out


def suite_pool(n_grids: int = 200, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_grids):
        grid = rng.standard_normal((24, 24, 8))
        s = POOL_STRIDES[k % len(POOL_STRIDES)]
        worst = max(worst, float(np.abs(pool_grid(grid, s) - pool_bruteforce(grid, s)).max()))
    grid = np.zeros((24, 24, 4))
    lengths = {s: len(pool_grid(grid, s)) for s in (2, 3, 4)}
    return [
        Check("pool/bruteforce", worst < POOL_TOL, f"{n_grids} grids, max abs err {worst:.1e}"),
        Check("pool/lengths", lengths == {2: 144, 3: 64, 4: 36}, str(lengths)),
        Check("pool/concat", lengths[3] + lengths[4] == 100, f"{lengths[3] + lengths[4]} query tokens"),
    ]


# ------------------------------------------------------------------ route


def _desk_batch(model: BreenModel, seed: int, n: int = 2):
    rng = np.random.default_rng(seed)
    cfg = model.config
    images = rng.random((n, cfg.canvas, cfg.canvas, cfg.channels)).astype(np.float32)
    tokens = model.patch_embed(images)
    seqs = [
        assemble_pretrain(nc.select(tokens, i), model.query_blocks(), rng.integers(3, 20, 6 + i).tolist(), model.embed_tokens)
        for i in range(n)
    ]
    return seqs


def without_expert(model: BreenModel) -> BreenModel:
    cfg = dataclasses.replace(model.config, use_image_expert=False)
    params = {k: v for k, v in model.params.items() if ".image_ffn." not in k}
    return BreenModel(cfg, params)


def suite_route(seed: int = 0) -> list[Check]:
    model = init_parameters(BreenConfig(seed=seed))
    checks = []

    # text-only batch: image experts must receive exactly zero gradient
    rng = np.random.default_rng(seed)
    seqs = [assemble_text(rng.integers(3, 20, 9 + i).tolist(), model.embed_tokens) for i in range(3)]
    model.zero_grad()
    nc.backward(objective(model.forward(seqs), {}, 1.0, 1.0).tensor)
    expert = [n for n in model.params if ".image_ffn." in n]
    nonzero = [n for n in expert if model[n].grad is not None and np.any(model[n].grad != 0)]
    checks.append(Check("route/text_only_zero_grad", not nonzero, f"{len(expert)} expert tensors, nonzero: {nonzero}"))
    model.zero_grad()

    # copy-initialized experts: routed forward is bitwise the single-FFN forward
    with nc.no_grad():
        seqs = _desk_batch(model, seed)
        routed = model.forward(seqs)
        ref = without_expert(model).forward(seqs)
    same = np.array_equal(routed.logits.data, ref.logits.data) and all(
        np.array_equal(routed.query_out[s].data, ref.query_out[s].data) for s in routed.query_out
    )
    checks.append(Check("route/copy_init_bitwise", same, "logits and query outputs"))

    # perturbing an image expert must leave text-only outputs untouched
    with nc.no_grad():
        seqs = [assemble_text(rng.integers(3, 20, 7).tolist(), model.embed_tokens)]
        before = model.forward(seqs).logits.data.copy()
        model["layers.0.image_ffn.w_up"].data = model["layers.0.image_ffn.w_up"].data + 1.0
        after = model.forward(seqs).logits.data
    checks.append(Check("route/text_isolated_from_expert", np.array_equal(before, after), "layer-0 expert perturbed"))
    return checks


# ----------------------------------------------------------------- freeze


def group_hashes(model: BreenModel) -> dict[str, str]:
    out = {}
    for group, names in model.groups().items():
        h = hashlib.sha256()
        for n in sorted(names):
            h.update(n.encode())
            h.update(np.ascontiguousarray(model[n].data).tobytes())
        out[group] = h.hexdigest()
    return out


def suite_freeze(seed: int = 0) -> list[Check]:
    from breen import synthdata, trainpipe

    model = init_parameters(BreenConfig(seed=seed))
    samples = synthdata.gen_samples(seed, 4, mode="caption")
    spec = trainpipe.StageSpec(Stage.PREALIGN, 1.0, 1.0, 1e-3, 4, 1)
    before = group_hashes(model)
    trainpipe.run_stage(model, spec, samples, seed=seed)
    after = group_hashes(model)
    allowed = trainpipe.freeze_policy(Stage.PREALIGN, model)
    changed = {g for g in before if before[g] != after[g]}
    return [
        Check("freeze/frozen_unchanged", not (changed - allowed), f"changed outside policy: {sorted(changed - allowed)}"),
        Check("freeze/trainable_moved", changed == allowed, f"unchanged trainable: {sorted(allowed - changed)}"),
    ]


SUITES = {"grad": suite_grad, "pool": suite_pool, "route": suite_route, "freeze": suite_freeze}


def run(suite: str = "all") -> list[Check]:
    names = list(SUITES) if suite == "all" else [suite]
    return [c for name in names for c in SUITES[name]()]
