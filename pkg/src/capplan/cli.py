"""``capplan`` command line: gen-data, train, eval, decode, verify.

Settings come from three layers, later ones winning: built-in defaults, a
flat ``key = value`` config file (``--config``), then command-line flags.
Named flags cover the common keys; ``--set key=value`` reaches any other.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import torch

from . import checks, infer
from .core import CapPlanError, NumericError, ShapeError, ValidationError
from .metrics import evaluate
from .model import CriticConfig, GeneratorConfig, init_parameters, load_checkpoint
from .synthworld import (
    DatasetFormatError,
    DatasetSplit,
    build_world,
    generate_dataset,
    make_world_spec,
    read_dataset,
    write_dataset,
)
from .train import TrainConfig, fit

log = logging.getLogger("capplan")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_SHAPE = 0, 1, 2, 3, 4, 5


class ConfigError(CapPlanError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # world and data
    num_tasks: int = 4
    vocab_size: int = 12
    num_stages: int = 6
    branch_probs: tuple = (0.75, 0.25)
    obs_dim: int = 512
    obs_noise_sigma: float = 0.1
    caption_informativeness: float = 1.0
    obs_sharing: str = "task_state"
    num_videos: int = 100
    horizons: tuple = (3,)
    # model
    max_horizon: int = 6
    hidden_dim: int = 128
    embed_hidden: int = 256
    context_hidden: int = 256
    num_layers: int = 2
    num_heads: int = 8
    memory_size: int = 128
    z_dim: int = 32
    ffn_mult: int = 4
    critic_hidden: tuple = (256, 64, 32)
    # training
    epochs: int = 200
    initial_lr: float = 7e-4
    decay_factor: float = 0.65
    decay_every: int = 40
    batch_size: int = 32
    lambda_c: float = 1.0
    lambda_ca: float = 1.0
    lambda_adv: float = 0.1
    critic_steps: int = 1
    optimizer: str = "sgd"
    momentum: float = 0.9
    contrastive_temperature: float = 1.0
    val_samples: int = 64
    ablate_context: bool = False
    resume: bool = False
    # evaluation
    samples: int = 1500
    window_index: int = 0
    inject_fault: bool = False
    # paths
    dataset: str = "data.jsonl"
    checkpoint: str = "model.ckpt"
    loss_curve: str = "loss_curve.jsonl"
    results: str = "results.jsonl"

    def world_spec(self):
        return make_world_spec(num_tasks=self.num_tasks, vocab_size=self.vocab_size,
                               num_stages=self.num_stages, branch_probs=self.branch_probs,
                               obs_dim=self.obs_dim, obs_noise_sigma=self.obs_noise_sigma,
                               caption_informativeness=self.caption_informativeness,
                               obs_sharing=self.obs_sharing, seed=self.seed)

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(num_actions=self.vocab_size, max_horizon=self.max_horizon,
                               obs_dim=self.obs_dim, hidden_dim=self.hidden_dim,
                               embed_hidden=self.embed_hidden, context_hidden=self.context_hidden,
                               num_layers=self.num_layers, num_heads=self.num_heads,
                               memory_size=self.memory_size, z_dim=self.z_dim, ffn_mult=self.ffn_mult,
                               use_context=not self.ablate_context)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, initial_lr=self.initial_lr, decay_factor=self.decay_factor,
                           decay_every=self.decay_every, batch_size=self.batch_size,
                           lambda_c=0.0 if self.ablate_context else self.lambda_c,
                           lambda_ca=self.lambda_ca, lambda_adv=self.lambda_adv,
                           critic_steps=self.critic_steps, optimizer=self.optimizer,
                           momentum=self.momentum, contrastive_temperature=self.contrastive_temperature,
                           val_samples=self.val_samples, seed=self.seed)


FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}
TUPLE_ITEM = {"branch_probs": float, "horizons": int, "critic_hidden": int}
PATH_KEYS = ("dataset", "checkpoint", "loss_curve", "results")


def _parse_value(key: str, raw: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if kind is tuple:
            return tuple(TUPLE_ITEM[key](x) for x in raw.replace(",", " ").split())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",),
                                       delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return {k: _parse_value(k, v) for k, v in parser["run"].items()}


def resolve_config(args: argparse.Namespace, out_key: str | None) -> RunConfig:
    values: dict = {}
    if args.config:
        values.update(read_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = _parse_value(key.strip(), raw)
    flag_map = {"seed": args.seed, "samples": args.samples, "dataset": args.dataset,
                "checkpoint": args.checkpoint, "epochs": args.epochs}
    values.update({k: v for k, v in flag_map.items() if v is not None})
    if args.horizon:
        values["horizons"] = tuple(args.horizon)
    if args.ablate_context:
        values["ablate_context"] = True
    if args.resume:
        values["resume"] = True
    if getattr(args, "inject_fault", False):
        values["inject_fault"] = True
    if args.out is not None and out_key:
        values[out_key] = args.out
    cfg = replace(RunConfig(), **values)
    paths = [Path(getattr(cfg, k)).resolve() for k in PATH_KEYS]
    if len(set(paths)) != len(paths):
        raise ConfigError("dataset, checkpoint, loss_curve and results paths must be distinct")
    if not cfg.horizons or any(T < 1 for T in cfg.horizons):
        raise ConfigError("horizons must be positive integers")
    return cfg


# ---------------------------------------------------------------- commands

def _load_split(cfg: RunConfig, ablate: bool = False) -> DatasetSplit:
    path = Path(cfg.dataset)
    if not path.exists():
        raise OSError(f"dataset file {path} does not exist")
    split = read_dataset(path)
    if ablate:
        split = DatasetSplit(*(tuple(w.with_captions_zeroed() for w in part)
                               for part in (split.train, split.val, split.test)), split.split_seed)
    return split


def _check_compatible(split: DatasetSplit, gen: GeneratorConfig):
    for part in (split.train, split.val, split.test):
        for w in part:
            if w.start_obs.shape[0] != gen.obs_dim:
                raise ShapeError(f"dataset observations have dimension {w.start_obs.shape[0]}, "
                                 f"model expects {gen.obs_dim}")
            if w.horizon > gen.max_horizon:
                raise ShapeError(f"dataset horizon {w.horizon} exceeds model max_horizon {gen.max_horizon}")
            if max(w.actions) >= gen.num_actions:
                raise ShapeError(f"dataset action {max(w.actions)} outside the model's {gen.num_actions} actions")


def cmd_gen_data(cfg: RunConfig) -> int:
    world = build_world(cfg.world_spec())
    split, _, skipped = generate_dataset(world, cfg.num_videos, cfg.horizons, split_seed=cfg.seed)
    out = Path(cfg.dataset)
    write_dataset(split, out)
    print(f"wrote {out}")
    print(f"{'split':<6} {'videos':>6} " + " ".join(f"{'T=' + str(T):>6}" for T in cfg.horizons))
    for name in ("train", "val", "test"):
        part = getattr(split, name)
        vids = len({w.source_video_id for w in part})
        counts = " ".join(f"{sum(w.horizon == T for w in part):>6}" for T in cfg.horizons)
        print(f"{name:<6} {vids:>6} {counts}")
    if skipped:
        print(f"skipped {skipped} (video, horizon) pairs shorter than the horizon")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    split = _load_split(cfg, ablate=cfg.ablate_context)
    gen = cfg.generator_config()
    _check_compatible(split, gen)
    model = init_parameters(gen, seed=cfg.seed, critic_config=CriticConfig(cfg.critic_hidden))

    def report(row):
        log.info("epoch %3d  l_ca %.4f  l_c %.4f  adv %.4f  critic %.4f  val_sr %.2f",
                 row["epoch"], row["l_ca"], row["l_c"], row["l_gen_adv"], row["l_critic"], row["val_sr"])

    result = fit(model, split.train, split.val, cfg.train_config(), checkpoint=cfg.checkpoint,
                 loss_curve=cfg.loss_curve, resume=cfg.resume, on_epoch=report)
    print(f"best epoch {result.best_epoch} val SR {result.best_val_sr:.2f}; "
          f"wrote {cfg.checkpoint} and {cfg.loss_curve}")
    return EXIT_OK


def _load_model_and_split(cfg: RunConfig):
    path = Path(cfg.checkpoint)
    if not path.exists():
        raise OSError(f"checkpoint {path} does not exist")
    model, meta, _ = load_checkpoint(path)
    model.eval()
    ablated = not model.config.use_context
    split = _load_split(cfg, ablate=ablated)
    _check_compatible(split, model.config)
    A = infer.estimate_transition([w.actions for w in split.train], model.config.num_actions)
    return model, split, A


def cmd_eval(cfg: RunConfig) -> int:
    model, split, A = _load_model_and_split(cfg)
    if not split.test:
        raise ValidationError("dataset has no test windows")
    reports = evaluate(model, split.test, K=cfg.samples, A=A, seed=cfg.seed, horizons=cfg.horizons)
    if not reports:
        raise ValidationError(f"no test windows with horizons {list(cfg.horizons)}")
    out = Path(cfg.results)
    with out.open("w", encoding="utf-8", newline="\n") as fh:
        for T in sorted(reports):
            fh.write(json.dumps(reports[T].to_dict(), sort_keys=True) + "\n")
    print(f"{'T':>3} {'SR':>7} {'mAcc':>7} {'mIoU':>7} {'KL':>7} {'NLL':>7} {'ModeP':>6} {'ModeR':>6} {'CosD':>6}")
    for T in sorted(reports):
        r = reports[T]
        print(f"{T:>3} {r.sr:>7.2f} {r.macc:>7.2f} {r.miou:>7.2f} {r.kl:>7.3f} {r.nll:>7.3f} "
              f"{r.mode_precision:>6.3f} {r.mode_recall:>6.3f} {r.cosine_distance:>6.3f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_decode(cfg: RunConfig, out: str | None) -> int:
    model, split, A = _load_model_and_split(cfg)
    if not 0 <= cfg.window_index < len(split.test):
        raise ConfigError(f"window_index {cfg.window_index} outside the {len(split.test)} test windows")
    w = split.test[cfg.window_index]
    decoded, dist = infer.plan(model, w, cfg.samples, A, seed=cfg.seed)
    record = {
        "video_id": w.source_video_id,
        "horizon": w.horizon,
        "plan": list(decoded),
        "ground_truth": list(w.actions),
        "marginals": [[round(float(p), 6) for p in row] for row in dist.probs],
        "K": cfg.samples,
        "seed": cfg.seed,
    }
    text = json.dumps(record) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    results = checks.run_all(inject_fault=cfg.inject_fault)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"verification failed: {', '.join(failed)}")
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------- entry point

OUT_KEYS = {"gen-data": "dataset", "train": "checkpoint", "eval": "results", "decode": None, "verify": None}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", metavar="PATH", help="flat key=value config file")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--out", metavar="PATH",
                        help="output path: dataset (gen-data), checkpoint (train), results (eval), plan (decode)")
    shared.add_argument("--horizon", type=int, action="append", metavar="T", help="repeatable")
    shared.add_argument("--samples", type=int, metavar="K")
    shared.add_argument("--ablate-context", action="store_true",
                        help="train without the caption-supervised context path")
    shared.add_argument("--dataset", metavar="PATH")
    shared.add_argument("--checkpoint", metavar="PATH")
    shared.add_argument("--epochs", type=int)
    shared.add_argument("--resume", action="store_true")
    shared.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="capplan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[shared], help="sample a synthetic world and write a dataset")
    sub.add_parser("train", parents=[shared], help="train and keep the best-on-validation checkpoint")
    sub.add_parser("eval", parents=[shared], help="evaluate a checkpoint on the test split")
    sub.add_parser("decode", parents=[shared], help="plan a single test window")
    verify = sub.add_parser("verify", parents=[shared], help="run the oracle self-checks")
    verify.add_argument("--inject-fault", action="store_true", help="corrupt one analytic gradient")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    try:
        cfg = resolve_config(args, OUT_KEYS[args.command])
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "decode":
            return cmd_decode(cfg, args.out)
        return cmd_verify(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ShapeError as exc:
        print(f"shape error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except ValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
