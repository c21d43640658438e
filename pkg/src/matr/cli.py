"""Command-line entry point: ``matr <command> [options]``.

Commands: synth, train, track, eval, collide, ablate. Every command prints
its resolved configuration first. Failures end with a single line on stderr,
``error code=<n> kind=<usage|data|numeric> message=<text>``, and exit status
1 (usage), 2 (data) or 3 (numeric).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .config import RunConfig, resolve
from .geometry import ConfigError
from .losses import NonFiniteLossError
from .metrics import evaluate
from .model import MATRModel, load_checkpoint, save_checkpoint
from .synthdata import (
    MotParseError,
    generate_dataset,
    load_dataset,
    load_sequence,
    read_mot,
    read_seqinfo,
    save_dataset,
    write_mot,
)
from .tracker import run as run_tracker
from .trainer import ablation_run, collision_eval, train

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _kind(code: int) -> str:
    return {EXIT_USAGE: "usage", EXIT_DATA: "data", EXIT_NUMERIC: "numeric"}[code]


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not str(path) or not p.exists():
        raise CliError(EXIT_DATA, f"{what} not found: {path}")
    return p


def _train_split(cfg: RunConfig) -> Path:
    return Path(cfg.paths.dataset) / "train"


def _eval_split(cfg: RunConfig) -> Path:
    return Path(cfg.paths.dataset) / "eval"


def _load_split(path: Path):
    _require(path, "dataset split")
    try:
        return load_dataset(path)
    except (OSError, MotParseError, KeyError, ValueError) as err:
        raise CliError(EXIT_DATA, f"cannot load dataset {path}: {err}") from err


def _load_model(path: str) -> MATRModel:
    _require(path, "checkpoint")
    try:
        model = load_checkpoint(path)
    except Exception as err:  # corrupt archives surface as several exception types
        raise CliError(EXIT_DATA, f"cannot load checkpoint {path}: {err}") from err
    model.eval()
    return model


# -- commands ----------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> list[Path]:
    root = Path(cfg.paths.dataset)
    train_set = generate_dataset(cfg.synth, cfg.data.train_clips, cfg.data.length,
                                 seed=1000 + cfg.seed)
    eval_set = generate_dataset(cfg.synth, cfg.data.eval_clips, cfg.data.length,
                                seed=5000 + cfg.seed)
    out = [save_dataset(train_set, root / "train", cfg.synth),
           save_dataset(eval_set, root / "eval", cfg.synth)]
    print(f"wrote {len(train_set)} training and {len(eval_set)} evaluation sequences "
          f"to {root} (seed {cfg.seed})")
    return out


def cmd_train(cfg: RunConfig, args) -> tuple[Path, Path]:
    dataset = _load_split(_train_split(cfg))
    out_dir = Path(cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    model = MATRModel(cfg.model)
    stem = f"{cfg.mode}_seed{cfg.seed}"
    result = train(model, dataset, cfg.train, cfg.loss, failure_dir=out_dir / "failures",
                   progress_every=args.progress)
    log_path = out_dir / f"loss_{stem}.csv"
    log_path.write_text(f"# mode={cfg.mode} seed={cfg.seed}\n" + result.loss_csv())
    ckpt = save_checkpoint(model, out_dir / f"model_{stem}.ckpt",
                           {"mode": cfg.mode, "seed": cfg.seed, "steps": cfg.train.steps})
    print(f"checksum {model.parameter_checksum()}")
    print(f"wrote {ckpt} and {log_path}")
    return ckpt, log_path


def cmd_track(cfg: RunConfig, args) -> Path:
    model = _load_model(cfg.paths.checkpoint)
    seq = load_sequence(_require(args.sequence, "sequence"))
    emissions = run_tracker(list(seq.frames), model, cfg.tracker)
    out = Path(args.out) if args.out else Path(cfg.paths.out_dir) / f"{seq.name}_{cfg.mode}_seed{cfg.seed}.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mot(emissions, seq.image_size, out)
    print(f"wrote {out}")
    return out


def cmd_eval(cfg: RunConfig, args) -> Path:
    gt_path = _require(args.gt, "ground truth")
    res_path = _require(args.result, "result")
    seq_dir = gt_path if gt_path.is_dir() else gt_path.parent
    if (seq_dir / "seqinfo").exists():
        info = read_seqinfo(seq_dir / "seqinfo")
        size, length = (int(info["height"]), int(info["width"])), int(info["length"])
    else:
        size, length = (cfg.synth.height, cfg.synth.width), None
    gt_file = gt_path / "gt.txt" if gt_path.is_dir() else gt_path
    try:
        truth = read_mot(gt_file, size, length)
        result = read_mot(res_path, size, len(truth))
    except MotParseError as err:
        raise CliError(EXIT_DATA, str(err)) from err
    report = evaluate(truth, result)
    out_dir = Path(cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"metrics_{res_path.stem}_seed{cfg.seed}"
    (out_dir / f"{stem}.txt").write_text(f"# seed={cfg.seed}\n" + report.to_text())
    (out_dir / f"{stem}_curve.csv").write_text(report.curve_csv())
    print(report.to_text(), end="")
    return out_dir / f"{stem}.txt"


def cmd_collide(cfg: RunConfig, args) -> Path:
    model = _load_model(cfg.paths.checkpoint)
    dataset = _load_split(_eval_split(cfg))
    stats = collision_eval(model, dataset, cfg.mode, cfg.ablate.collision_clips,
                           cfg.train.clip_len, cfg.train.max_stride, seed=cfg.seed)
    out_dir = Path(cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / f"collision_{cfg.mode}_seed{cfg.seed}.csv"
    out.write_text(stats.to_csv())
    print(f"mean_distance={stats.mean_distance} fraction_at_one={stats.fraction_at_one} "
          f"samples={stats.sample_count}")
    return out


def cmd_ablate(cfg: RunConfig, args) -> tuple[Path, Path]:
    train_set = _load_split(_train_split(cfg))
    eval_set = _load_split(_eval_split(cfg))
    out_dir = Path(cfg.paths.out_dir)
    torch.set_num_threads(1)
    table = ablation_run(train_set, eval_set, cfg.ablate.modes, cfg.ablate.seeds, cfg.train,
                         cfg.model, cfg.loss, cfg.tracker, cfg.ablate.collision_clips,
                         checkpoint_dir=out_dir / "checkpoints")
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = "-".join(str(s) for s in cfg.ablate.seeds)
    csv_path = out_dir / f"ablation_seeds{seeds}.csv"
    txt_path = out_dir / f"ablation_seeds{seeds}.txt"
    csv_path.write_text(table.to_csv())
    txt_path.write_text(table.to_text())
    print(table.to_text(), end="")
    return csv_path, txt_path


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "track": cmd_track, "eval": cmd_eval,
            "collide": cmd_collide, "ablate": cmd_ablate}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="matr", description="Toy motion-aware tracking transformer.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", help="overrides the config and MATR_SEED")
        p.add_argument("--mode", help="matr, bl_imp_only, qim_like or klf")
        p.add_argument("--data", help="dataset directory (paths.dataset)")
        p.add_argument("--out-dir", help="output directory (paths.out_dir)")
        if name in ("track", "collide"):
            p.add_argument("--checkpoint", help="model checkpoint (paths.checkpoint)")
        if name in ("train", "ablate"):
            p.add_argument("--steps", help="training steps (train.steps)")
        if name == "train":
            p.add_argument("--progress", type=int, default=0, help="log every N steps")
        if name == "track":
            p.add_argument("--sequence", required=True, help="sequence directory")
            p.add_argument("--out", help="result file")
        if name == "eval":
            p.add_argument("--gt", required=True, help="gt.txt or a sequence directory")
            p.add_argument("--result", required=True, help="result file in MOT format")
    return parser


def _flags(args) -> dict[str, str]:
    flags = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(EXIT_USAGE, f"--set expects KEY=VALUE, got {item!r}")
        flags[key.strip()] = value.strip()
    direct = {"seed": "seed", "mode": "mode", "data": "paths.dataset",
              "out_dir": "paths.out_dir", "checkpoint": "paths.checkpoint", "steps": "train.steps"}
    for attr, key in direct.items():
        value = getattr(args, attr, None)
        if value is not None:
            flags[key] = str(value)
    return flags


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.config is not None:
            _require(args.config, "config file")
        try:
            cfg = resolve(args.config, _flags(args))
        except ConfigError as err:
            raise CliError(EXIT_USAGE, str(err)) from err
        print("# resolved config")
        print(cfg.to_text(), end="")
        sys.stdout.flush()
        COMMANDS[args.command](cfg, args)
        return 0
    except CliError as err:
        code, message = err.code, str(err)
    except NonFiniteLossError as err:
        code, message = EXIT_NUMERIC, str(err)
    except ConfigError as err:
        code, message = EXIT_USAGE, str(err)
    except (FileNotFoundError, MotParseError) as err:
        code, message = EXIT_DATA, str(err)
    flat = " ".join(message.split())
    print(f"error code={code} kind={_kind(code)} message={flat}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
