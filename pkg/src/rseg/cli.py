"""Command line surface: synthesis, training, inference, evaluation, gradcheck.

Every subcommand resolves its options as defaults, overridden by an optional
``--config FILE`` of ``key = value`` lines ('#' starts a comment), overridden
by explicit flags, and prints the resolved configuration before doing any
work, so each run is reproducible from its own output.

Heavy imports happen inside the command handlers so that ``--threads`` can pin
the BLAS thread-count environment variables before numpy first loads.
"""

from __future__ import annotations

import argparse
import glob
import os
import sys

_THREAD_ENV = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}error: {message}")


def _flag(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


_SCHEMAS = {
    "synth": {"out": str, "count": int, "size": str, "seed": int, "decoys": _flag,
              "noise": float, "threads": int},
    "train": {"data": str, "val": str, "out": str, "backbone": str, "levels": int,
              "base_channels": int, "recurrent": _flag, "bptt": str,
              "teacher_forcing": _flag, "lr": float, "epochs": int, "patience": int,
              "seed": int, "threshold": float, "max_seq_len": int, "threads": int},
    "segment": {"model": str, "in": str, "out": str, "threshold": float, "threads": int},
    "evaluate": {"pred": str, "gt": str, "csv": str, "threads": int},
    "gradcheck": {"backbone": str, "eps": float, "dtype": str, "threads": int},
}

_DEFAULTS = {
    "synth": {"count": 4, "size": "16x48x48", "seed": 0, "decoys": False,
              "noise": 30.0, "threads": 1},
    "train": {"backbone": "unet", "levels": 4, "base_channels": 16, "recurrent": False,
              "bptt": "detach", "teacher_forcing": False, "lr": 1e-4, "epochs": 40,
              "patience": 10, "seed": 0, "threshold": 0.5, "max_seq_len": 8,
              "threads": 1},
    "segment": {"threshold": 0.5, "threads": 1},
    "evaluate": {"threads": 1},
    "gradcheck": {"backbone": "unet", "eps": 1e-5, "dtype": "f64", "threads": 1},
}

_REQUIRED = {
    "synth": ("out",),
    "train": ("data", "val", "out"),
    "segment": ("model", "in", "out"),
    "evaluate": ("pred", "gt", "csv"),
    "gradcheck": (),
}


def _dest(key: str) -> str:
    return "in_path" if key == "in" else key


def build_parser() -> _Parser:
    parser = _Parser(prog="rseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    synth = sub.add_parser("synth", help="generate phantom volume/mask pairs")
    synth.add_argument("--out", default=None, help="output directory")
    synth.add_argument("--count", type=int, default=None, help="number of volumes")
    synth.add_argument("--size", default=None, help="volume extents as DxHxW")
    synth.add_argument("--seed", type=int, default=None, help="base seed; volume i uses a derived stream")
    synth.add_argument("--decoys", action="store_true", default=None,
                       help="add a same-shape decoy that teleports between slices")
    synth.add_argument("--noise", type=float, default=None, help="Gaussian noise sigma")

    tr = sub.add_parser("train", help="train a model on vol_*/mask_* pairs")
    tr.add_argument("--data", default=None, help="training directory")
    tr.add_argument("--val", default=None, help="validation directory")
    tr.add_argument("--out", default=None, help="checkpoint path (.rsck); CSV goes beside it")
    tr.add_argument("--backbone", choices=("unet", "segunet", "attunet"), default=None)
    tr.add_argument("--levels", type=int, default=None)
    tr.add_argument("--base-channels", type=int, default=None)
    tr.add_argument("--recurrent", action="store_true", default=None,
                    help="feed each prediction into the next slice")
    tr.add_argument("--bptt", choices=("detach", "full"), default=None,
                    help="gradient handling across the feedback edge")
    tr.add_argument("--teacher-forcing", action="store_true", default=None)
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--patience", type=int, default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--threshold", type=float, default=None, help="validation Dice threshold")
    tr.add_argument("--max-seq-len", type=int, default=None, help="BPTT chunk length")

    seg = sub.add_parser("segment", help="segment a volume with a checkpoint")
    seg.add_argument("--model", default=None, help="checkpoint path")
    seg.add_argument("--in", dest="in_path", default=None, help="input volume (.mvf)")
    seg.add_argument("--out", default=None, help="output mask (.mvf)")
    seg.add_argument("--threshold", type=float, default=None)

    ev = sub.add_parser("evaluate", help="compare a predicted mask against a reference")
    ev.add_argument("--pred", default=None, help="predicted mask (.mvf)")
    ev.add_argument("--gt", default=None, help="reference mask (.mvf)")
    ev.add_argument("--csv", default=None, help="report destination")

    gc = sub.add_parser("gradcheck", help="finite-difference check of a tiny backbone")
    gc.add_argument("--backbone", choices=("unet", "segunet", "attunet"), default=None)
    gc.add_argument("--eps", type=float, default=None, help="finite-difference step")
    gc.add_argument("--dtype", choices=("f32", "f64"), default=None)

    for p in (synth, tr, seg, ev, gc):
        p.add_argument("--config", default=None, help="key = value file; flags override it")
        p.add_argument("--threads", type=int, default=None,
                       help="BLAS thread cap; 1 (the default) is bit-deterministic; "
                            "takes full effect when set at process start")
    return parser


def _read_config_file(path: str) -> dict:
    raw = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            key, sep, value = text.partition("=")
            if not sep:
                raise ValueError(f"malformed config line {line.strip()!r} in {path}")
            raw[key.strip()] = value.strip()
    return raw


def _resolve(command: str, args: argparse.Namespace) -> dict:
    schema = _SCHEMAS[command]
    eff = dict(_DEFAULTS[command])
    if args.config is not None:
        for key, text in _read_config_file(args.config).items():
            if key not in schema:
                raise ValueError(f"unknown config key {key!r} for {command}")
            eff[key] = schema[key](text)
    for key in schema:
        value = getattr(args, _dest(key))
        if value is not None:
            eff[key] = value
    missing = [k for k in _REQUIRED[command] if eff.get(k) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise ValueError(f"missing required option(s): {flags}")
    return eff


def _set_threads(n) -> None:
    if n is not None and n > 0:
        for var in _THREAD_ENV:
            os.environ[var] = str(n)


def _banner(command: str, eff: dict) -> None:
    print(f"command = {command}")
    for key in sorted(eff):
        print(f"{key} = {eff[key]}")


def _parse_size(text: str):
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ValueError(f"size must look like DxHxW, got {text!r}")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise ValueError(f"size must look like DxHxW, got {text!r}") from None
    return dims


def _cmd_synth(eff: dict) -> int:
    from .data import PhantomSpec, derive_seed, generate_phantom, save_volume

    dims = _parse_size(eff["size"])
    out = eff["out"]
    os.makedirs(out, exist_ok=True)
    for i in range(eff["count"]):
        spec = PhantomSpec(dims=dims, noise_sigma=eff["noise"], decoys=eff["decoys"],
                           seed=derive_seed(eff["seed"], i))
        vol, mask = generate_phantom(spec)
        save_volume(vol, os.path.join(out, f"vol_{i:03d}.mvf"))
        save_volume(mask, os.path.join(out, f"mask_{i:03d}.mvf"))
    print(f"wrote {eff['count']} volume/mask pairs to {out}")
    return 0


def _load_dataset(dirpath: str, pad_to: int):
    from .data import load_volume, normalize_intensity, to_sequence
    from .data import Volume
    from .metrics import VolumeMask

    vol_paths = sorted(glob.glob(os.path.join(dirpath, "vol_*.mvf")))
    if not vol_paths:
        raise ValueError(f"no vol_*.mvf files in {dirpath}")
    seqs = []
    for vol_path in vol_paths:
        mask_path = os.path.join(os.path.dirname(vol_path),
                                 os.path.basename(vol_path).replace("vol_", "mask_", 1))
        if not os.path.exists(mask_path):
            raise ValueError(f"missing mask file {mask_path} for {vol_path}")
        vol = load_volume(vol_path)
        mask = load_volume(mask_path)
        if not isinstance(vol, Volume) or not isinstance(mask, VolumeMask):
            raise ValueError(f"{vol_path} / {mask_path}: expected a volume and a mask")
        seqs.append(to_sequence(normalize_intensity(vol), mask, pad_to=pad_to))
    return seqs


def _write_history_csv(path: str, history) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("epoch,train_loss,val_loss,val_dice\n")
        for h in history:
            fh.write(f"{h.epoch},{h.train_loss:.6f},{h.val_loss:.6f},{h.val_dice:.6f}\n")


def _cmd_train(eff: dict) -> int:
    from .backbones import ModelConfig, build_model
    from .trainer import TrainConfig, save_checkpoint, train

    mconfig = ModelConfig(backbone=eff["backbone"], levels=eff["levels"],
                          base_channels=eff["base_channels"], recurrent=eff["recurrent"])
    tconfig = TrainConfig(lr=eff["lr"], epochs=eff["epochs"], patience=eff["patience"],
                          seed=eff["seed"], bptt_mode=eff["bptt"],
                          teacher_forcing=eff["teacher_forcing"],
                          threshold=eff["threshold"], max_seq_len=eff["max_seq_len"])
    pad_to = 2 ** mconfig.levels
    train_set = _load_dataset(eff["data"], pad_to)
    val_set = _load_dataset(eff["val"], pad_to)
    store = build_model(mconfig, seed=eff["seed"])
    history = train(store, tconfig, train_set, val_set)
    for h in history:
        print(f"epoch {h.epoch:03d} train {h.train_loss:.6f} "
              f"val {h.val_loss:.6f} dice {h.val_dice:.6f}")
    save_checkpoint(store, eff["out"])
    csv_path = os.path.splitext(eff["out"])[0] + ".csv"
    _write_history_csv(csv_path, history)
    print(f"saved checkpoint to {eff['out']}")
    print(f"saved history to {csv_path}")
    return 0


def _cmd_segment(eff: dict) -> int:
    from .data import Volume, load_volume, normalize_intensity, save_volume
    from .recurrent import segment_volume
    from .trainer import load_checkpoint

    store = load_checkpoint(eff["model"])
    vol = load_volume(eff["in"])
    if not isinstance(vol, Volume):
        raise ValueError(f"{eff['in']}: expected an intensity volume, got a mask")
    mask = segment_volume(store, normalize_intensity(vol), threshold=eff["threshold"])
    save_volume(mask, eff["out"])
    print(f"wrote mask with {mask.count()} foreground voxels to {eff['out']}")
    return 0


def _cmd_evaluate(eff: dict) -> int:
    from .data import load_volume
    from .metrics import VolumeMask, evaluate, write_report_csv

    pred = load_volume(eff["pred"])
    gt = load_volume(eff["gt"])
    if not isinstance(pred, VolumeMask) or not isinstance(gt, VolumeMask):
        raise ValueError("evaluate expects two mask files")
    scan_id = os.path.splitext(os.path.basename(eff["pred"]))[0]
    report = evaluate(pred, gt, scan_id)
    write_report_csv([report], eff["csv"])
    print(f"dice {report.dice:.6f} asd {report.asd_mm:.6f} "
          f"hd95 {report.hd95_mm:.6f} hd {report.hd_mm:.6f}")
    return 0


def _cmd_gradcheck(eff: dict) -> int:
    import numpy as np

    from . import autodiff as ad
    from .autodiff import Tensor
    from .backbones import ModelConfig, build_model, forward
    from .gradcheck import max_rel_error, numeric_grad_sampled, sample_indices

    dtype = np.float64 if eff["dtype"] == "f64" else np.float32
    config = ModelConfig(backbone=eff["backbone"], levels=2, base_channels=4)
    store = build_model(config, seed=0, dtype=dtype)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 1, 16, 16)).astype(dtype)
    weights = rng.normal(size=x.shape).astype(dtype)

    out = forward(store, Tensor(x), train=True)
    loss = ad.reduce_sum(ad.mul(out, Tensor(weights)))
    store.zero_grads()
    ad.backward(loss)

    def value():
        with ad.no_grad():
            return float(np.sum(forward(store, Tensor(x), train=True).data * weights))

    worst = 0.0
    for _, tens in store.trainable_items():
        idxs = sample_indices(rng, tens.data.size, 3)
        numeric = numeric_grad_sampled(value, tens.data, idxs, h=eff["eps"])
        analytic = tens.grad.reshape(-1)[idxs]
        worst = max(worst, max_rel_error(analytic, numeric, floor=1e-4))
    store.zero_grads()
    print(f"max relative error: {worst:.3e}")
    return 0 if worst <= 1e-3 else 2


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "segment": _cmd_segment,
    "evaluate": _cmd_evaluate,
    "gradcheck": _cmd_gradcheck,
}


def run_cli(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help prints and exits 0
        return int(exc.code or 0)
    if args.command is None:
        print(parser.format_usage() + "error: a subcommand is required", file=sys.stderr)
        return 1
    try:
        eff = _resolve(args.command, args)
        _set_threads(eff.get("threads"))
        _banner(args.command, eff)
        return _COMMANDS[args.command](eff)
    except (ValueError, KeyError, FileNotFoundError, IsADirectoryError,
            NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> None:
    sys.exit(run_cli(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
