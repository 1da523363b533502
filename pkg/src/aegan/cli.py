"""Command-line entry point: ``aegan <command> [flags]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical abort.
Failures print one line ``aegan: error code=<n> kind=<kind> msg=<text>`` to stderr.
Progress goes to stderr; artifacts go to ``--out``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import training as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import STAGE_PREFIX, NumericalAbort, TrainConfig, dump_config, load_config_file
from .data import DataError, load_dataset, num_classes, synthetic_dataset, write_grid, write_image
from .metrics import (
    EvalProtocol,
    evaluate,
    high_frequency_residual,
    load_extractor,
    save_extractor,
    train_desk_classifier,
)
from .networks import AEGAN, NetworkConfig
from .runtime import tune_allocator

log = logging.getLogger("aegan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D401 - argparse hook
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--verbose", action="store_true")


def _data_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", required=required, help="image folder or 'synthetic'")
    p.add_argument("--synthetic-kind", default="shapes", choices=("shapes", "gradients"))
    p.add_argument("--synthetic-count", type=int, default=2000)
    p.add_argument("--holdout", type=int, default=0, help="tail images excluded from training")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--checkpoint-every", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aegan", description="AEGAN staged training, sampling and evaluation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-ae", help="Step 1: autoencoder")
    _common(p)
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--checkpoint", type=Path, help="resume from this checkpoint")
    p.add_argument("--embedding-spatial", type=int)

    p = sub.add_parser("train-gan", help="Step 2: embedding GAN and denoiser (needs a Step-1 checkpoint)")
    _common(p)
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--no-denoiser", action="store_true", help="train only the embedding GAN")
    p.add_argument("--denoiser-every", type=int, help="denoiser update on every n-th iteration")

    p = sub.add_parser("finetune", help="Step 3: joint fine-tuning (needs a Step-2 checkpoint)")
    _common(p)
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--checkpoint", type=Path)

    p = sub.add_parser("sample", help="write generated images and a preview grid")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--columns", type=int, default=8)
    p.add_argument("--no-denoiser", action="store_true")

    p = sub.add_parser("interpolate", help="linear latent interpolation strip")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--no-denoiser", action="store_true")

    p = sub.add_parser("evaluate", help="FID, Inception Score and MS-SSIM report")
    _common(p)
    _data_flags(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--count", type=int, help="sample count (protocol default otherwise)")
    p.add_argument("--protocol", choices=("full", "desk"), default="desk")
    p.add_argument("--ms-ssim-scales", type=int, help="override the protocol's MS-SSIM scale count")
    p.add_argument("--extractor", type=Path, help="feature-extractor file; trained and saved here if absent")
    p.add_argument("--no-denoiser", action="store_true", help="score F(G_E(z)) without the denoiser")

    p = sub.add_parser("ablate-embedding", help="autoencoder trained per embedding extent")
    _common(p)
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--embedding-spatial", type=int, nargs="+", required=True)
    p.add_argument("--count", type=int, default=256, help="decoded samples per setting")
    return parser


# -- helpers ---------------------------------------------------------------------------


def _resolve_network(args) -> tuple[NetworkConfig, dict[str, TrainConfig]]:
    if args.config is not None:
        if not args.config.is_file():
            raise DataError(f"config file not found: {args.config}")
        net, train = load_config_file(args.config)
    else:
        net, train = NetworkConfig(), {s: TrainConfig.for_stage(s) for s in STAGE_PREFIX}
    return net, train


def _stage_config(args, train: dict[str, TrainConfig], stage: str) -> TrainConfig:
    cfg = train[stage]
    overrides = {}
    for name in ("epochs", "learning_rate", "batch_size", "max_steps", "checkpoint_every", "denoiser_every"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _load(path: Path | None, command: str, net: NetworkConfig | None = None, explicit_config: bool = False):
    if path is None:
        raise UsageError(f"{command} requires --checkpoint")
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    model, state = load_checkpoint(path)
    if explicit_config and net is not None and model.cfg != net:
        raise CheckpointError(f"config geometry {net} does not match checkpoint geometry {model.cfg}")
    return model, state


def _dataset(args, net: NetworkConfig, seed: int):
    if args.data == "synthetic":
        data = synthetic_dataset(args.synthetic_kind, args.synthetic_count, net.resolution, seed)
    else:
        data = load_dataset(args.data, net.resolution, seed)
    if args.holdout:
        return data.split(args.holdout)
    return data, None


def _with_embedding(net: NetworkConfig, spatial: int) -> NetworkConfig:
    """Geometry with a different embedding extent; the generator seed shrinks with it if needed."""
    try:
        return net.replace(embedding_spatial=spatial, generator_seed_spatial=min(net.generator_seed_spatial, spatial))
    except ValueError as exc:
        raise UsageError(f"--embedding-spatial {spatial}: {exc}") from exc


def _echo(net: NetworkConfig, train: dict[str, TrainConfig], extra: dict[str, object], out: Path) -> None:
    text = dump_config(net, train)
    if extra:
        # run metadata as comments keeps the echo loadable with --config
        text += "\n".join(f"# {k} = {v}" for k, v in extra.items()) + "\n"
    sys.stdout.write(text)
    sys.stdout.flush()
    (out / "config.cfg").write_text(text, encoding="utf-8")


def _checkpoint_hook(model, config: TrainConfig, out: Path, prefix: str):
    def hook(state):
        if state.epoch % config.checkpoint_every == 0:
            save_checkpoint(model, state, out / f"{prefix}_epoch{state.epoch:04d}.ckpt")

    return hook


def _finish(model, state, out: Path, prefix: str) -> None:
    save_checkpoint(model, state, out / f"{prefix}.ckpt")
    state.write_history(out / f"{prefix}_loss.csv")
    log.info("wrote %s", out / f"{prefix}.ckpt")


# -- commands --------------------------------------------------------------------------


def cmd_train_ae(args) -> int:
    net, train = _resolve_network(args)
    if args.embedding_spatial is not None:
        net = _with_embedding(net, args.embedding_spatial)
    cfg = _stage_config(args, train, "AE")
    _echo(net, {"AE": cfg}, {"command": "train-ae", "data": args.data, "holdout": args.holdout}, args.out)
    data, held = _dataset(args, net, cfg.seed)
    if args.checkpoint is not None:
        model, state = _load(args.checkpoint, "train-ae", net, True)
    else:
        model, state = AEGAN(net, cfg.seed), None
    state = T.train_autoencoder(data, cfg, model, state, _checkpoint_hook(model, cfg, args.out, "ae"))
    _finish(model, state, args.out, "ae")
    if held is not None:
        log.info("held-out reconstruction L1 %.5f", T.reconstruction_l1(model, held))
    return EXIT_OK


def cmd_train_gan(args) -> int:
    net, train = _resolve_network(args)
    model, prior = _load(args.checkpoint, "train-gan", net, args.config is not None)
    if prior is not None and prior.stage not in ("AE", "GAN"):
        raise DataError(f"train-gan needs a Step-1 checkpoint, got stage {prior.stage}")
    cfg = _stage_config(args, train, "GAN")
    extra = {"command": "train-gan", "data": args.data, "denoiser": not args.no_denoiser}
    _echo(model.cfg, {"GAN": cfg}, extra, args.out)
    data, _ = _dataset(args, model.cfg, cfg.seed)
    state = prior if prior is not None and prior.stage == "GAN" else None
    hook = _checkpoint_hook(model, cfg, args.out, "gan")
    state = T.train_gan(data, cfg, model, state, hook, train_denoiser=not args.no_denoiser)
    _finish(model, state, args.out, "gan")
    return EXIT_OK


def cmd_finetune(args) -> int:
    net, train = _resolve_network(args)
    model, prior = _load(args.checkpoint, "finetune", net, args.config is not None)
    if prior is not None and prior.stage == "AE":
        raise DataError("finetune needs a Step-2 checkpoint, got a Step-1 checkpoint")
    cfg = _stage_config(args, train, "FINETUNE")
    _echo(model.cfg, {"FINETUNE": cfg}, {"command": "finetune", "data": args.data}, args.out)
    data, _ = _dataset(args, model.cfg, cfg.seed)
    state = prior if prior is not None and prior.stage == "FINETUNE" else None
    state = T.finetune_joint(data, cfg, model, state, _checkpoint_hook(model, cfg, args.out, "finetune"))
    _finish(model, state, args.out, "final")
    return EXIT_OK


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def cmd_sample(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be positive")
    model, _ = _load(args.checkpoint, "sample")
    extra = {"command": "sample", "count": args.count, "seed": _seed(args), "denoiser": not args.no_denoiser}
    _echo(model.cfg, {}, extra, args.out)
    preview = []
    written = 0
    for batch in T.iter_samples(model, args.count, _seed(args), denoise=not args.no_denoiser):
        for img in batch:
            write_image(img, args.out / f"sample_{written:05d}.png")
            written += 1
        if len(preview) < args.columns**2:
            preview.extend(batch[: args.columns**2 - len(preview)])
    write_grid(np.stack(preview), args.columns, args.out / "grid.png")
    log.info("wrote %d samples to %s", written, args.out)
    return EXIT_OK


def cmd_interpolate(args) -> int:
    model, _ = _load(args.checkpoint, "interpolate")
    if args.steps < 2:
        raise UsageError("--steps must be at least 2")
    extra = {"command": "interpolate", "steps": args.steps, "seed": _seed(args), "denoiser": not args.no_denoiser}
    _echo(model.cfg, {}, extra, args.out)
    z = T.sample_noise(model, 2, _seed(args))
    frames = T.interpolate(model, z[0], z[1], args.steps, denoise=not args.no_denoiser)
    write_grid(frames, args.steps, args.out / "interpolation.png")
    np.save(args.out / "endpoints.npy", z)
    return EXIT_OK


def _extractor(args, real, labels, k: int):
    if args.extractor is not None and args.extractor.is_file():
        return load_extractor(args.extractor)
    if labels is None:
        raise DataError("training the desk feature extractor needs labelled data (use --data synthetic)")
    model = train_desk_classifier(real, labels, k, seed=_seed(args))
    if args.extractor is not None:
        save_extractor(model, args.extractor)
    return model


def cmd_evaluate(args) -> int:
    model, _ = _load(args.checkpoint, "evaluate")
    protocol = EvalProtocol.full() if args.protocol == "full" else EvalProtocol.desk()
    if args.count is not None:
        protocol = dataclasses.replace(protocol, sample_count=args.count)
    if args.ms_ssim_scales is not None:
        protocol = dataclasses.replace(protocol, ms_ssim_scales=args.ms_ssim_scales)
    protocol = dataclasses.replace(protocol, seed=_seed(args))
    extra = {"command": "evaluate", "data": args.data, "denoiser": not args.no_denoiser}
    extra.update({f"protocol.{k}": v for k, v in dataclasses.asdict(protocol).items()})
    _echo(model.cfg, {}, extra, args.out)
    data, held = _dataset(args, model.cfg, _seed(args))
    reference = held if held is not None else data
    real = reference.images()
    k = num_classes(data) if data.labels is not None else 0
    extractor = _extractor(args, data.images(), data.labels, k)
    fake = T.sample(model, protocol.sample_count, _seed(args), denoise=not args.no_denoiser)
    label = "without denoiser" if args.no_denoiser else "with denoiser"
    report = evaluate(fake, real, extractor, protocol, label=label)
    name = "report_no_denoiser" if args.no_denoiser else "report"
    report.write_csv(args.out / f"{name}.csv", verbose=args.verbose)
    (args.out / f"{name}.txt").write_text(report.to_table(args.verbose) + "\n", encoding="utf-8")
    print(report.to_table(args.verbose), file=sys.stderr)
    return EXIT_OK


def cmd_ablate_embedding(args) -> int:
    net, train = _resolve_network(args)
    cfg = _stage_config(args, train, "AE")
    extra = {"command": "ablate-embedding", "embedding_spatial": " ".join(map(str, args.embedding_spatial))}
    _echo(net, {"AE": cfg}, extra, args.out)
    rows = []
    for spatial in args.embedding_spatial:
        variant = _with_embedding(net, spatial)
        data, held = _dataset(args, variant, cfg.seed)
        held = held if held is not None else data
        model = AEGAN(variant, cfg.seed)
        state = T.train_autoencoder(data, cfg, model)
        save_checkpoint(model, state, args.out / f"ae_e{spatial}.ckpt")
        decoded = T.decode_samples(model, data, args.count, cfg.seed)
        rows.append(
            {
                "embedding_spatial": spatial,
                "compression_ratio": variant.compression_ratio,
                "heldout_l1": T.reconstruction_l1(model, held),
                "hf_residual": high_frequency_residual(decoded),
            }
        )
        log.info("embedding %d: %s", spatial, rows[-1])
    with open(args.out / "ablation.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(rows[0]) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row.values()) + "\n")
    return EXIT_OK


COMMANDS = {
    "train-ae": cmd_train_ae,
    "train-gan": cmd_train_gan,
    "finetune": cmd_finetune,
    "sample": cmd_sample,
    "interpolate": cmd_interpolate,
    "evaluate": cmd_evaluate,
    "ablate-embedding": cmd_ablate_embedding,
}


def _fail(code: int, kind: str, message: str) -> int:
    text = " ".join(str(message).split())
    print(f"aegan: error code={code} kind={kind} msg={text}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    tune_allocator()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s", stream=sys.stderr, force=True
    )
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except NumericalAbort as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except (DataError, CheckpointError, OSError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except ValueError as exc:
        return _fail(EXIT_USAGE, "usage", exc)


if __name__ == "__main__":
    sys.exit(main())
