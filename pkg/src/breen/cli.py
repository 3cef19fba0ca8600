"""``breen`` command line: data generation, staged training, verification, pooling, heatmaps.

Exit codes: 0 success, 2 argument/config/geometry error, 3 I/O or file-format
error, 4 training diverged (non-finite loss).
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from breen import introspect, synthdata, trainpipe, verify
from breen import numcore as nc
from breen.model import BreenConfig
from breen.sequence import Stage
from breen.teacher import FormatError, GeometryError, encode_grid, load_feature_grid, pool_grid

log = logging.getLogger("breen")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NAN = 0, 2, 3, 4
STAGE_ORDER = [Stage.PREALIGN, Stage.PRETRAIN, Stage.SFT]


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


def preset(name: str) -> dict:
    """Full run configuration for a named preset (``desk`` or ``paper``)."""
    if name not in ("desk", "paper"):
        raise ConfigError(f"unknown defaults preset {name!r} (expected desk or paper)")
    table = trainpipe.DESK_STAGES if name == "desk" else trainpipe.PAPER_STAGES
    stages = {s.value: {k: v for k, v in spec.to_dict().items() if k != "stage"} for s, spec in table.items()}
    return {
        "defaults": name,
        "seed": 0,
        "model": BreenConfig().to_dict(),
        "stages": stages,
        "data": {"caption": None, "qa": None, "seed": 0, "n_caption": 512, "n_qa": 256},
        "paths": {"out_dir": "run"},
        "verify": {"suites": ["pool", "route", "freeze"]},
    }


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict) and k != "model":
            out[k] = _merge(out[k], v, f"{where}{k}.")
        elif k == "model":
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


def resolve_config(raw: dict) -> dict:
    """Overlay a user config on its preset and validate it."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(preset(raw.get("defaults", "desk")), {k: v for k, v in raw.items() if k != "defaults"})
    try:
        BreenConfig.from_dict(cfg["model"])
        for name, spec in cfg["stages"].items():
            trainpipe.StageSpec(Stage(name), **spec)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return cfg


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return resolve_config(raw)


def stage_spec(cfg: dict, stage: Stage) -> trainpipe.StageSpec:
    return trainpipe.StageSpec(stage, **cfg["stages"][stage.value])


def _paths(cfg: dict) -> dict:
    out = Path(cfg["paths"]["out_dir"])
    return {
        "out": out,
        "metrics": out / "metrics.jsonl",
        "ckpt": {s: out / f"{s.value}.brck" for s in STAGE_ORDER},
    }


def _dataset(cfg: dict, mode: str):
    path = cfg["data"][mode]
    if path:
        return synthdata.load_dataset(path)
    n = cfg["data"]["n_caption" if mode == "caption" else "n_qa"]
    seed = cfg["data"]["seed"] * 2 + (mode == "qa")
    return synthdata.gen_samples(seed, n, mode=mode, teacher_dim=cfg["model"]["teacher_dim"])


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    if args.n < 1:
        args.parser.error("--n must be at least 1")
    samples = synthdata.gen_dataset(args.seed, args.n, args.mode, args.out, args.teacher_seed, args.teacher_dim)
    print(f"wrote {len(samples)} {args.mode} records to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    paths = _paths(cfg)
    paths["out"].mkdir(parents=True, exist_ok=True)
    stages = STAGE_ORDER if args.stage == "all" else [Stage(args.stage)]
    model_cfg = BreenConfig.from_dict(cfg["model"])
    model = state = None
    first = stages[0]

    if args.resume:
        ckpt = paths["ckpt"][first]
        model, state = trainpipe.load_checkpoint(ckpt, expect_config=model_cfg)
        print(f"resuming {first.value} from {ckpt} at step {state.step}")
    elif first != Stage.PREALIGN and not args.from_scratch:
        prev = STAGE_ORDER[STAGE_ORDER.index(first) - 1]
        ckpt = paths["ckpt"][prev]
        if not ckpt.exists():
            raise ConfigError(f"{first.value} needs the {prev.value} checkpoint {ckpt} (or pass --from-scratch)")
        model, prev_state = trainpipe.load_checkpoint(ckpt, expect_config=model_cfg)
        state = prev_state.for_stage(model, stage_spec(cfg, first), cfg["seed"])
    if model is None:
        model = trainpipe.new_model(model_cfg)

    datasets = {}
    for stage in stages:
        spec = stage_spec(cfg, stage)
        mode = "qa" if stage == Stage.SFT else "caption"
        if mode not in datasets:
            datasets[mode] = trainpipe.prepare(_dataset(cfg, mode), model_cfg.strides)
        if state is None or state.stage != stage:
            state = (
                trainpipe.TrainState.fresh(model, spec, cfg["seed"])
                if state is None
                else state.for_stage(model, spec, cfg["seed"])
            )

        def report(st, br, every=max(1, spec.steps // 10)):
            if st.step % every == 0 or st.step == spec.steps:
                print(f"{stage.value} step {st.step}/{spec.steps}: " + " ".join(f"{k}={v:.4f}" for k, v in br.record().items()))

        state, _ = trainpipe.run_stage(
            model, spec, datasets[mode], state=state, seed=cfg["seed"],
            metrics_path=paths["metrics"], checkpoint_path=paths["ckpt"][stage], callback=report,
        )
        print(f"{stage.value} done; checkpoint {paths['ckpt'][stage]}")
    return EXIT_OK


def cmd_verify(args) -> int:
    checks = verify.run(args.suite)
    width = max(len(c.name) for c in checks)
    for c in checks:
        print(f"{c.name:<{width}}  {'PASS' if c.passed else 'FAIL'}  {c.detail}")
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_OK if not failed else 1


def cmd_pool(args) -> int:
    grid = load_feature_grid(args.input)
    tokens = pool_grid(grid.features, args.stride)
    n = int(round(np.sqrt(len(tokens))))
    Path(args.out).write_bytes(encode_grid(tokens.reshape(n, n, -1).astype(np.float32)))
    print(f"pooled {grid.grid_size}x{grid.grid_size} grid with stride {args.stride} into {len(tokens)} tokens -> {args.out}")
    return EXIT_OK


def _load_sample(path, index: int):
    for i, s in enumerate(synthdata.iter_dataset(path)):
        if i == index:
            return s
    raise ConfigError(f"{path} has no sample {index}")


def cmd_viz(args) -> int:
    model, _ = trainpipe.load_checkpoint(args.ckpt)
    sample = _load_sample(args.data, args.sample)
    stage = Stage.SFT if sample.mode == synthdata.QA else Stage.PRETRAIN
    prepared = trainpipe.prepare([sample], model.config.strides)
    layer = introspect.middle_layer(model.config.n_layers) if args.layer is None else args.layer
    with nc.no_grad():
        seqs, _ = trainpipe.build_batch(model, prepared, stage)
        out = model.forward(seqs, capture_attn=True)
    seq = seqs[0]
    labels = np.flatnonzero(seq.lm_labels >= 0)
    # by default, the position that predicts the first generated token
    token = int(labels[0] - 1) if args.token is None else args.token
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    written = []
    s = introspect._resolve_stride(seq, args.granularity)
    qmap = introspect.reconstruct_heatmap(introspect.attention_to_queries(out, token, layer, s), s, model.config.teacher_grid)
    written += introspect.emit_heatmap(qmap, f"{prefix}_query_s{s}", overlay=sample.pixels).values()
    imap = introspect.attention_to_image(out, token, layer)
    written += introspect.emit_heatmap(imap, f"{prefix}_image", overlay=sample.pixels).values()
    if args.all_layers:
        for i, h in enumerate(introspect.all_layers(out, token)):
            written += introspect.emit_heatmap(h, f"{prefix}_image_layer{i}").values()
    print(f"token {token}, layer {layer}:")
    for p in written:
        print(f"  {p}")
    return EXIT_OK


def cmd_eval_loss(args) -> int:
    model, _ = trainpipe.load_checkpoint(args.ckpt)
    samples = synthdata.load_dataset(args.data)
    stage = Stage(args.stage) if args.stage else (Stage.SFT if samples[0].mode == synthdata.QA else Stage.PRETRAIN)
    result = trainpipe.evaluate_loss(model, samples, stage, args.alpha, args.beta)
    if stage == Stage.SFT:
        result["qa_accuracy"] = trainpipe.evaluate_qa(model, samples)
    print(json.dumps({"stage": stage.value, "n": len(samples), **result}, indent=2))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="breen", description="Encoder-free multimodal toy model: data, training, checks, heatmaps.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True, help="number of records (>= 1)")
    p.add_argument("--mode", choices=[synthdata.CAPTION, synthdata.QA], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--teacher-seed", type=int, default=0)
    p.add_argument("--teacher-dim", type=int, default=32)
    p.set_defaults(func=cmd_gen_data, parser=p)

    p = sub.add_parser("train", help="run one or all training stages from a JSON config")
    p.add_argument("--config", required=True, help="JSON run config (see README)")
    p.add_argument("--stage", choices=[s.value for s in STAGE_ORDER] + ["all"], default="all")
    p.add_argument("--resume", action="store_true", help="continue the stage from its own checkpoint")
    p.add_argument("--from-scratch", action="store_true", help="start a later stage without the previous checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="run invariant suites and print a pass/fail table")
    p.add_argument("--suite", choices=[*verify.SUITES, "all"], default="all")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("pool", help="average-pool a feature-grid file")
    p.add_argument("--in", dest="input", required=True, help="input BRTF grid")
    p.add_argument("--stride", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("viz", help="export attention heatmaps for one sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset file holding the sample")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--layer", type=int, default=None, help="default: middle layer")
    p.add_argument("--granularity", default="fine", help="fine, coarse or a stride")
    p.add_argument("--token", type=int, default=None, help="query position (default: predicts first answer token)")
    p.add_argument("--all-layers", action="store_true", help="also export image heatmaps for every layer")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("eval-loss", help="loss breakdown (and qa accuracy) of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--stage", choices=[s.value for s in STAGE_ORDER], default=None)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.set_defaults(func=cmd_eval_loss)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        threads = int(os.environ.get("BREEN_THREADS", "1"))
    except ValueError:
        print("error: BREEN_THREADS must be an integer", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except trainpipe.TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NAN
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except trainpipe.ConfigMismatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except trainpipe.CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, GeometryError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
