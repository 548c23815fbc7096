"""Command-line interface: ``haarnet {generate,transform,train,eval,gradcheck}``.

Every flag can also be set in a ``--config`` file of ``key=value`` lines
(``#`` starts a comment); keys are flag names without the leading dashes and
flags given on the command line take precedence.

Exit codes: 0 success, 1 a check failed, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data
from .errors import HaarNetError, TrainingError
from .haar import haar_forward
from .nn import HaarNet, HaarNetConfig
from .tensor import Tensor, no_grad

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2

logger = logging.getLogger("haarnet")


class UsageError(Exception):
    """Bad arguments or unreadable inputs; reported with exit code 2."""


def _switch(value: str) -> bool:
    v = value.strip().lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on or off, got {value!r}")


def _add_switches(p: argparse.ArgumentParser) -> None:
    for name, what in (("mup", "morphological up-sampling"), ("mrelu", "morphological activations"), ("mhw", "MHW down-sampling")):
        p.add_argument(f"--{name}", type=_switch, default="on", metavar="on|off", help=f"use {what}")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="haarnet", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        p.add_argument("--config", type=Path, default=None, help="key=value file with defaults for the flags below")
        return p

    p = command("generate", "write synthetic RGB-D scenes in the dataset layout")
    p.add_argument("--out", type=Path, required=True, help="output root; scenes go to OUT/scenes/<seed>/")
    p.add_argument("--count", type=int, default=32, help="number of scenes")
    p.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"), help="scene height and width")
    p.add_argument("--classes", type=int, default=5, help="number of classes including background")
    p.add_argument("--seed", type=int, default=0, help="seed of the first scene; later scenes use seed+1, ...")

    p = command("transform", "decompose a PGM/PPM image into Haar subbands")
    p.add_argument("--in", dest="input", type=Path, required=True, help="binary PGM (P5) or PPM (P6) image")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--levels", type=int, default=1, help="number of decomposition levels")

    p = command("train", "train a mini HaarNet on a generated dataset")
    p.add_argument("--data", type=Path, required=True, help="dataset root written by generate")
    p.add_argument("--out", type=Path, required=True, help="directory for log.csv and checkpoints")
    p.add_argument("--epochs", type=int, default=300, help="schedule horizon E")
    p.add_argument("--max-epochs", type=int, default=None, help="stop early after this many epochs (schedule unchanged)")
    p.add_argument("--lr", type=float, default=5e-3, help="initial learning rate")
    p.add_argument("--momentum", type=float, default=0.9, help="Nesterov momentum")
    p.add_argument("--batch-size", type=int, default=8, help="mini-batch size")
    p.add_argument("--seed", type=int, default=0, help="initialisation and shuffling seed")
    p.add_argument("--save-every", type=int, default=0, help="checkpoint period in epochs (0: final only)")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    p.add_argument("--classes", type=int, default=5, help="number of classes")
    _add_switches(p)

    p = command("eval", "print miou,pixel_acc,boundary_f1 for a checkpoint or saved predictions")
    p.add_argument("--data", type=Path, required=True, help="dataset root with ground truth")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path, help="model checkpoint to evaluate")
    src.add_argument("--pred", type=Path, help="predictions in the dataset layout (labels.mten per scene)")
    p.add_argument("--classes", type=int, default=5, help="number of classes when evaluating --pred")
    p.add_argument("--boundary-tol", type=int, default=None, help="boundary match distance in pixels (default from image diagonal)")

    p = command("gradcheck", "compare analytic and finite-difference gradients")
    p.add_argument("--cases", type=int, default=100, help="seeded cases per operator")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.add_argument("--eps", type=float, default=1e-3, help="central-difference step")
    p.add_argument("--ops", default="all", help="comma-separated operator names or 'all'")
    _add_switches(p)
    return parser


def _read_config(path: Path) -> dict[str, str]:
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config(parser: argparse.ArgumentParser, argv: list[str], args: argparse.Namespace) -> argparse.Namespace:
    """Re-parse with the config file's values installed as defaults."""
    sub = _subparser(parser, args.command)
    by_long = {}
    for a in sub._actions:
        for opt in a.option_strings:
            if opt.startswith("--") and a.dest not in ("help", "config"):
                by_long[opt[2:]] = a
    defaults = {}
    for key, value in _read_config(args.config).items():
        action = by_long.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        if action.nargs is not None and action.nargs not in ("?",):
            items = value.split()
            defaults[action.dest] = [action.type(v) if action.type else v for v in items]
        else:
            defaults[action.dest] = action.type(value) if action.type else value
        action.required = False
    for group in sub._mutually_exclusive_groups:
        if any(a.dest in defaults for a in group._group_actions):
            group.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _check_required(args):
    missing = [k for k in ("out", "data", "input") if hasattr(args, k) and getattr(args, k) is None]
    if missing:
        raise UsageError(f"missing required setting(s): {', '.join(missing)}")
    if args.command == "eval" and (args.checkpoint is None) == (args.pred is None):
        raise UsageError("give exactly one of checkpoint and pred")


def cmd_generate(args) -> int:
    h, w = args.size
    if args.count < 1:
        raise UsageError("--count must be positive")
    if not 2 <= args.classes <= data.MAX_CLASSES:
        raise UsageError(f"--classes must be between 2 and the palette limit of {data.MAX_CLASSES}, got {args.classes}")
    if min(h, w) < 32:
        raise UsageError("--size must be at least 32 32")
    for i in range(args.count):
        seed = args.seed + i
        data.save_scene(args.out / "scenes" / str(seed), data.synth_scene(seed, h, w, args.classes))
    print(f"wrote {args.count} scenes to {args.out / 'scenes'}")
    return EXIT_OK


def _to_bytes(x: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(x, 0.0, 1.0) * 255).astype(np.uint8)


def detail_to_bytes(band: np.ndarray) -> np.ndarray:
    """Map ``[-m, m]`` affinely onto ``[0, 255]`` with 0 at 128, ``m = max |band|``."""
    m = float(np.abs(band).max(initial=0.0))
    if m == 0.0:
        return np.full(band.shape, 128, dtype=np.uint8)
    return np.rint(127.5 * (1.0 + band.astype(np.float64) / m)).astype(np.uint8)


def _write_image(path: Path, chw: np.ndarray) -> None:
    data.save_pnm(path, chw[0] if chw.shape[0] == 1 else chw)


def cmd_transform(args) -> int:
    if args.levels < 1:
        raise UsageError("--levels must be at least 1")
    img = data.load_pnm(args.input)
    ext = ".pgm" if img.shape[1] == 1 else ".ppm"
    args.out.mkdir(parents=True, exist_ok=True)
    current = Tensor(img)
    with no_grad():
        for level in range(1, args.levels + 1):
            sb = haar_forward(current)
            stem = args.out / f"level{level}"
            data.save_tensor(f"{stem}_approx.mten", sb.approx.data)
            _write_image(Path(f"{stem}_approx{ext}"), _to_bytes(sb.approx.data[0]))
            for name in "vhd":
                band = sb.band(name)
                data.save_tensor(f"{stem}_{name}.mten", np.ascontiguousarray(band))
                _write_image(Path(f"{stem}_{name}{ext}"), detail_to_bytes(band[0]))
            current = sb.approx
    h, w = current.shape[2:]
    print(f"wrote {args.levels} level(s) to {args.out}; coarsest approximation {h}x{w}")
    return EXIT_OK


def _model_config(args, classes) -> HaarNetConfig:
    return HaarNetConfig(num_classes=classes, use_mup=args.mup, use_mrelu=args.mrelu, use_mhw=args.mhw, seed=args.seed)


def cmd_train(args) -> int:
    from .train import TrainConfig, train_loop

    dataset = data.load_dataset(args.data)
    if dataset.labels.max() >= args.classes:
        raise UsageError(f"dataset has label {int(dataset.labels.max())} but --classes is {args.classes}")
    cfg = TrainConfig(
        lr=args.lr,
        epochs=args.epochs,
        momentum=args.momentum,
        batch_size=args.batch_size,
        seed=args.seed,
        save_every=args.save_every,
    )
    model = HaarNet(_model_config(args, args.classes))
    print(f"parameters: {model.num_parameters()}")
    result = train_loop(model, dataset, cfg, out_dir=args.out, resume=args.resume, max_epochs=args.max_epochs)
    if result.log:
        last = result.log[-1]
        print(f"epoch {last['epoch']}: loss {last['loss']:.6f} miou {last['miou']:.4f} pixel_acc {last['pixel_acc']:.4f}")
    print(f"checkpoint: {result.checkpoints[-1]}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, load_model, metrics

    truth = data.load_dataset(args.data)
    if args.checkpoint is not None:
        model, stats = load_model(args.checkpoint)
        report = evaluate(model, truth, stats, args.boundary_tol)
    else:
        pred = data.load_dataset(args.pred)
        if pred.seeds != truth.seeds:
            raise UsageError("prediction and ground-truth scene sets differ")
        report = metrics(pred.labels, truth.labels, args.classes, args.boundary_tol)
    print("miou,pixel_acc,boundary_f1")
    print(f"{report.miou!r},{report.pixel_accuracy!r},{report.boundary_f1!r}")
    return EXIT_OK


# operators exercised by each optional component
_SWITCH_OPS = {"mup": ["morph_upsample"], "mrelu": ["morph_activation"], "mhw": ["haar_forward", "mhw_fuse"]}


def cmd_gradcheck(args) -> int:
    from .gradcheck import OPS, TOLERANCE, run_suite

    if args.ops == "all":
        ops = list(OPS)
    else:
        ops = [o.strip() for o in args.ops.split(",") if o.strip()]
        unknown = [o for o in ops if o not in OPS]
        if unknown:
            raise UsageError(f"unknown operator(s): {', '.join(unknown)}; choose from {', '.join(OPS)}")
    for switch, names in _SWITCH_OPS.items():
        if not getattr(args, switch):
            ops = [o for o in ops if o not in names]
    results = run_suite(ops, cases=args.cases, seed=args.seed, eps=args.eps)
    failed = 0
    for op, cases in results.items():
        bad = [c for c in cases if not c.ok]
        worst = max(c.error for c in cases)
        print(f"{op}: {len(cases)} cases, max relative error {worst:.3e}, {'ok' if not bad else 'FAIL'}")
        for c in bad:
            failed += 1
            print(
                f"  violation op={c.op} seed={c.seed} leaf={c.leaf} index={c.index} "
                f"analytic={c.analytic:.9g} numeric={c.numeric:.9g} error={c.error:.3e} > {TOLERANCE:g}"
            )
    return EXIT_CHECK if failed else EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "transform": cmd_transform,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        # config-file keys may supply required flags, so parse leniently first
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config", type=Path)
        known, _ = pre.parse_known_args(argv)
        if known.config is not None and argv and argv[0] in COMMANDS:
            stub = argparse.Namespace(command=argv[0], config=known.config)
            args = _apply_config(parser, argv, stub)
        else:
            args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"haarnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _check_required(args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"haarnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"haarnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (OSError, HaarNetError) as exc:
        print(f"haarnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
