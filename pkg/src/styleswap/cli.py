"""Command-line surface tying dataset synthesis, pre-training, training,
swapping, inversion, and evaluation together.

Configuration is `key = value` lines with # comments; any key can also be
given as a --key flag, and flags win. Every run writes its fully resolved
configuration next to its outputs so it can be reproduced exactly.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np
import torch

from . import ckpt, evaluation, inversion, losses, pretrain, synth, training
from .networks import GeneratorConfig

_TAG_CLI_POOL = 0xB00


class CliError(Exception):
    pass


# schema: key -> (type tag, default). "ints" is a comma list of ints.
_DATASET_KEYS = {
    "num_identities": ("int", 20),
    "frames_per_identity": ("int", 50),
    "resolution": ("int", 32),
    "seed": ("int", 0),
}

_GENERATOR_KEYS = {
    "num_blocks": ("int", 4),
    "style_dim": ("int", 64),
    "channels": ("ints", None),  # low-to-high resolution, len == num_blocks
    "attribute_channels": ("ints", None),
}

_TRAIN_KEYS = {
    **_GENERATOR_KEYS,
    "steps": ("int", 20000),
    "batch_size": ("int", 16),
    "learning_rate": ("float", 1e-4),
    "lambda_id": ("float", 10.0),
    "lambda_fm": ("float", 100.0),
    "lambda_rec": ("float", 100.0),
    "lambda_mask": ("float", 1.0),
    "r1_interval": ("int", 16),
    "seed": ("int", 0),
    "mask_stage_start": ("int", None),
    "checkpoint_interval": ("int", 1000),
}

_EMBEDDER_KEYS = {
    "resolution": ("int", 32),
    "embed_dim": ("int", 64),
    "width": ("int", 32),
    "num_identities": ("int", 100),
    "frames_per_identity": ("int", 8),
    "steps": ("int", 4000),
    "batch_size": ("int", 64),
    "learning_rate": ("float", 1e-3),
    "logit_scale": ("float", 16.0),
    "cosine_margin": ("float", 0.0),
    "pair_weight": ("float", 0.0),
    "seed": ("int", 0),
    "dataset_seed": ("int", 9000),
}

_INVERT_KEYS = {
    "iterations": ("int", None),  # resolved to 200 one-to-one / 50 one-to-many
    "step_size": ("float", 0.01),
    "space": ("str", "w_plus"),
    "lambda_rec": ("float", 100.0),
    "lambda_id": ("float", 10.0),
    "pool_size": ("int", 8),
    "seed": ("int", 0),
    "one_to_many": ("bool", False),
}

_EVAL_KEYS = {
    "num_swaps": ("int", 200),
    "seed": ("int", 0),
    "eval_embedder_steps": ("int", 4000),
    "pose_steps": ("int", 1400),
}


def _parse_value(key: str, kind: str, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "ints":
            return [int(p) for p in text.split(",") if p.strip()]
        return text
    except ValueError:
        raise CliError(f"cannot parse value for '{key}': {raw!r} (expected {kind})")


def parse_config(path: str | None, flags: dict, schema: dict) -> dict:
    """Merge defaults, config file, and flags (strongest last)."""
    resolved = {k: default for k, (_, default) in schema.items()}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                lines = fh.readlines()
        except OSError as err:
            raise CliError(f"cannot read config file {path}: {err}")
        for lineno, line in enumerate(lines, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise CliError(f"{path}:{lineno}: expected 'key = value', got {line.strip()!r}")
            key, raw = (part.strip() for part in body.split("=", 1))
            if key not in schema:
                raise CliError(f"{path}:{lineno}: unknown config key '{key}'")
            resolved[key] = _parse_value(key, schema[key][0], raw)
    for key, raw in flags.items():
        if raw is None:
            continue
        if key not in schema:
            raise CliError(f"unknown config key '{key}'")
        resolved[key] = _parse_value(key, schema[key][0], raw)
    if "seed" in schema and flags.get("seed") is None and os.environ.get("STYLESWAP_SEED"):
        file_set = False
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                file_set = any(
                    line.split("#", 1)[0].split("=", 1)[0].strip() == "seed"
                    for line in fh
                    if "=" in line.split("#", 1)[0]
                )
        if not file_set:
            resolved["seed"] = _parse_value("seed", "int", os.environ["STYLESWAP_SEED"])
    return resolved


def write_resolved(config: dict, out_path: str):
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        for key in sorted(config):
            value = config[key]
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            fh.write(f"{key} = {value}\n")


def _resolved_path(out: str) -> str:
    if os.path.isdir(out) or not os.path.splitext(out)[1]:
        return os.path.join(out, "resolved-config.txt")
    return os.path.splitext(out)[0] + ".config.txt"


def _generator_config(cfg: dict) -> GeneratorConfig:
    blocks = cfg["num_blocks"]
    resolutions = [4 * 2**i for i in range(blocks)]
    kwargs: dict = {"num_blocks": blocks, "style_dim": cfg["style_dim"]}
    if cfg.get("channels"):
        if len(cfg["channels"]) != blocks:
            raise CliError(f"channels needs {blocks} comma-separated values (low to high resolution)")
        kwargs["channel_schedule"] = dict(zip(resolutions, cfg["channels"]))
    if cfg.get("attribute_channels"):
        if len(cfg["attribute_channels"]) != blocks:
            raise CliError(f"attribute_channels needs {blocks} comma-separated values")
        kwargs["attribute_channels"] = dict(zip(resolutions, cfg["attribute_channels"]))
    return GeneratorConfig(**kwargs)


def _load_image(path: str, resolution: int) -> torch.Tensor:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        side = min(im.size)
        left, top = (im.size[0] - side) // 2, (im.size[1] - side) // 2
        im = im.crop((left, top, left + side, top + side))
        if side != resolution:
            im = im.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
    return training.to_tensor(arr)


def _save_image(tensor: torch.Tensor, path: str):
    from PIL import Image

    arr = ((training.to_image(tensor)[0] + 1.0) * 127.5).clip(0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _save_mask(mask: torch.Tensor, path: str):
    from PIL import Image

    arr = (mask.detach()[0, 0].numpy() * 255.0).clip(0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def mask_was_trained(header: dict) -> bool:
    return header["step"] > header["train_config"]["mask_stage_start"]


def cmd_synth_data(args) -> int:
    cfg = parse_config(args.config, _flag_dict(args, _DATASET_KEYS), _DATASET_KEYS)
    spec = synth.DatasetSpec(**cfg)
    dataset = synth.SyntheticDataset.generate(spec)
    synth.save_dataset(dataset, args.out)
    write_resolved(cfg, _resolved_path(args.out))
    print(f"wrote {spec.num_identities} identities x {spec.frames_per_identity} frames to {args.out}")
    return 0


def cmd_pretrain_embedder(args) -> int:
    cfg = parse_config(args.config, _flag_dict(args, _EMBEDDER_KEYS), _EMBEDDER_KEYS)
    pcfg = pretrain.EmbedderPretrainConfig(**cfg)
    embedder, stats = pretrain.pretrain_identity_embedder(pcfg)
    pretrain.save_embedder(args.out, embedder, pcfg, stats)
    write_resolved(cfg, _resolved_path(args.out))
    print(json.dumps({"out": args.out, **stats}))
    return 0


def cmd_train(args) -> int:
    cfg = parse_config(args.config, _flag_dict(args, _TRAIN_KEYS), _TRAIN_KEYS)
    dataset = synth.load_dataset(args.data)
    gen_config = _generator_config(cfg)
    if gen_config.resolution != dataset.spec.resolution:
        raise CliError(
            f"model resolution {gen_config.resolution} does not match dataset resolution {dataset.spec.resolution}"
        )
    weights = losses.LossWeights(
        lambda_id=cfg["lambda_id"],
        lambda_fm=cfg["lambda_fm"],
        lambda_rec=cfg["lambda_rec"],
        lambda_mask=cfg["lambda_mask"],
    )
    tcfg = training.TrainConfig(
        steps=cfg["steps"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"],
        weights=weights,
        r1_interval=cfg["r1_interval"],
        seed=cfg["seed"],
        mask_stage_start=cfg["mask_stage_start"],
        checkpoint_interval=cfg["checkpoint_interval"],
    )
    embedder_state = None
    embed_dim, id_width = 64, 32
    if args.embedder:
        embedder, header = pretrain.load_embedder(args.embedder)
        if header["resolution"] != gen_config.resolution:
            raise CliError("embedder resolution does not match the model")
        embedder_state = embedder.state_dict()
        embed_dim, id_width = header["embed_dim"], header["width"]
    write_resolved(cfg, _resolved_path(args.out))
    state = training.train(
        tcfg,
        dataset,
        gen_config=gen_config,
        embedder_state=embedder_state,
        out_dir=args.out,
        resume_from=args.resume,
        embed_dim=embed_dim,
        id_width=id_width,
    )
    final = os.path.join(args.out, f"ckpt-{state.step}.bin")
    print(f"finished at step {state.step}; checkpoint {final}")
    return 0


def _target_list(target: str) -> list[tuple[str, str]]:
    """(path, output stem) pairs; directories enumerate PNGs in name order."""
    if os.path.isdir(target):
        names = sorted(n for n in os.listdir(target) if n.lower().endswith(".png"))
        if not names:
            raise CliError(f"no .png files in target directory {target}")
        return [(os.path.join(target, n), os.path.splitext(n)[0]) for n in names]
    return [(target, None)]


def cmd_swap(args) -> int:
    model, header = training.load_model(args.ckpt)
    model.eval()
    res = model.config.resolution
    source = _load_image(args.source, res)
    styles = None
    if args.styles:
        arrays, sheader = ckpt.load_arrays(args.styles)
        if "w_plus" not in arrays:
            raise CliError(f"styles file {args.styles} has no 'w_plus' entry")
        styles = torch.from_numpy(arrays["w_plus"].copy())[None]
    use_mask = mask_was_trained(header) and not args.no_mask
    os.makedirs(args.out, exist_ok=True)
    for path, stem in _target_list(args.target):
        target = _load_image(path, res)
        with torch.no_grad():
            if styles is None:
                out = model.swap(source, target, mask_enabled=True)
            else:
                pyramid = model.attribute_encoder(target)
                out = model.generator(pyramid, styles, mask_enabled=True, target=target)
        image = out.blended if use_mask else out.image
        prefix = "" if stem is None else f"{stem}."
        _save_image(image, os.path.join(args.out, f"{prefix}swap.png"))
        _save_mask(out.masks.final, os.path.join(args.out, f"{prefix}mask.png"))
    print(f"wrote swaps to {args.out}")
    return 0


def cmd_invert(args) -> int:
    cfg = parse_config(args.config, _flag_dict(args, _INVERT_KEYS), _INVERT_KEYS)
    one_to_many = bool(cfg["one_to_many"])
    if not one_to_many and not args.target:
        raise CliError("one-to-one inversion needs --target (or set one_to_many = true)")
    model, header = training.load_model(args.ckpt)
    model.eval()
    res = model.config.resolution
    dataset = synth.load_dataset(args.data)
    if dataset.spec.resolution != res:
        raise CliError("pool dataset resolution does not match the model")

    rng = np.random.default_rng(np.random.SeedSequence((cfg["seed"], _TAG_CLI_POOL)))
    flat = dataset.images.reshape(-1, res, res, 3)
    idx = rng.choice(flat.shape[0], size=min(cfg["pool_size"], flat.shape[0]), replace=False)
    pool = training.to_tensor(flat[idx])

    icfg = inversion.InversionConfig(
        iterations=cfg["iterations"],
        step_size=cfg["step_size"],
        space=cfg["space"],
        lambda_rec=cfg["lambda_rec"],
        lambda_id=cfg["lambda_id"],
        pool=pool,
        seed=cfg["seed"],
        mask_enabled=mask_was_trained(header),
    )
    source = _load_image(args.source, res)
    if one_to_many:
        result = inversion.invert_one_to_many(source, icfg, model)
    else:
        result = inversion.invert_one_to_one(source, _load_image(args.target, res), icfg, model)

    styles = result.styles
    if styles.ndim == 1:  # W space: store tied rows explicitly
        styles = styles[None].repeat(model.config.num_style_slots, 1)
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    ckpt.save_arrays(
        args.out,
        {"w_plus": styles.numpy()},
        {
            "kind": "styles",
            "space": result.space,
            "best_iteration": result.best_iteration,
            "source": os.path.basename(args.source),
        },
    )
    trace_path = os.path.splitext(args.out)[0] + ".trace.jsonl"
    with open(trace_path, "w", encoding="utf-8") as fh:
        for record in result.trace:
            fh.write(json.dumps(record.to_dict()) + "\n")
    write_resolved(cfg, _resolved_path(args.out))
    print(f"wrote styles to {args.out} (best_iteration={result.best_iteration})")
    return 0


def cmd_eval(args) -> int:
    cfg = parse_config(args.config, _flag_dict(args, _EVAL_KEYS), _EVAL_KEYS)
    model, header = training.load_model(args.ckpt)
    model.eval()
    dataset = synth.load_dataset(args.data)
    res = model.config.resolution
    if dataset.spec.resolution != res:
        raise CliError("dataset resolution does not match the model")

    base = pretrain.EmbedderPretrainConfig(resolution=res, steps=cfg["eval_embedder_steps"])
    eval_cfg = pretrain.evaluation_embedder_config(base)
    eval_embedder, emb_stats = pretrain.pretrain_identity_embedder(eval_cfg)
    pose_model, pose_stats = pretrain.pretrain_yaw_regressor(
        pretrain.YawPretrainConfig(resolution=res, steps=cfg["pose_steps"])
    )
    report = evaluation.evaluate(
        model,
        dataset,
        eval_embedder,
        pose_model,
        num_swaps=cfg["num_swaps"],
        seed=cfg["seed"],
        mask_enabled=mask_was_trained(header),
    )
    payload = {
        "report": report.to_dict(),
        "config": cfg,
        "eval_embedder": emb_stats,
        "pose_regressor": pose_stats,
        "checkpoint_sha256": _sha256(args.ckpt),
        "dataset_spec": dataset.spec.__dict__,
        "model_step": header["step"],
    }
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
    write_resolved(cfg, _resolved_path(args.out))
    print(json.dumps(report.to_dict()))
    return 0


def _flag_dict(args, schema: dict) -> dict:
    return {key: getattr(args, key, None) for key in schema}


def _add_schema_flags(parser: argparse.ArgumentParser, schema: dict):
    for key in schema:
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="styleswap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic face dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    _add_schema_flags(p, _DATASET_KEYS)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("pretrain-embedder", help="train and freeze an identity embedder")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    _add_schema_flags(p, _EMBEDDER_KEYS)
    p.set_defaults(fn=cmd_pretrain_embedder)

    p = sub.add_parser("train", help="train the swapping model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embedder", default=None, help="pretrained identity embedder file")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--config", default=None)
    _add_schema_flags(p, _TRAIN_KEYS)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("swap", help="swap a source identity onto target frames")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True, help="target image or directory of frames")
    p.add_argument("--styles", default=None, help="styles file from invert")
    p.add_argument("--no-mask", action="store_true", help="use the raw generated image")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_swap)

    p = sub.add_parser("invert", help="optimize identity styles on a frozen model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory supplying the distractor pool")
    p.add_argument("--source", required=True)
    p.add_argument("--target", default=None)
    p.add_argument("--out", required=True, help="styles file to write")
    p.add_argument("--config", default=None)
    _add_schema_flags(p, _INVERT_KEYS)
    p.set_defaults(fn=cmd_invert)

    p = sub.add_parser("eval", help="measure swap quality on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--config", default=None)
    _add_schema_flags(p, _EVAL_KEYS)
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
