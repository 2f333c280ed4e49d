"""``segtrus`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 I/O or format error,
3 numeric failure (gradient check failure, non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from . import kernels as K
from . import loss_metrics as LM
from .errors import (
    ConfigError, DataError, FormatError, NumericError, SegtrusError, ShapeError, UsageError,
)
from .model import RRC_INDICES, RRC_INDICES_PLUS_ADD, NetworkConfig, build_network, forward, init_params
from .train import (
    TrainConfig, evaluate, load_checkpoint, predict_proba, run_ablation, run_training,
    save_checkpoint, write_ablation, write_log_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

PRED_COLOR = (255, 0, 0)
TRUTH_COLOR = (0, 255, 0)
BOTH_COLOR = (255, 255, 0)

log = logging.getLogger("segtrus")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def mask_boundary(mask):
    """Foreground pixels with at least one background 4-neighbour (outside counts as background)."""
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    inner = m[1:-1, 1:-1]
    all_fg = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return inner & ~all_fg


def render_overlay(image, pred_mask, true_mask):
    """RGB rendering of the grayscale image with both mask boundaries drawn in."""
    gray = D.quantize(image)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    pb, tb = mask_boundary(pred_mask), mask_boundary(true_mask)
    rgb[pb & ~tb] = PRED_COLOR
    rgb[tb & ~pb] = TRUTH_COLOR
    rgb[pb & tb] = BOTH_COLOR
    return rgb


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_data(args):
    samples = D.generate_samples(args.count, args.size, args.seed)
    ds = D.Dataset(samples)
    if len(ds) >= 10:
        ds = ds.with_split(D.split_dataset(ds, D.Rng(args.seed)))
    D.save_dataset(args.out, ds)
    print(f"wrote {len(ds)} phantoms of {args.size}x{args.size} to {args.out}")
    return EXIT_OK


def _network_config(args, input_size):
    if args.config:
        text = args.config
        if not text.lstrip().startswith("{"):
            text = Path(text).read_text()
        try:
            values = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"network config is not valid JSON: {exc}") from exc
        values.setdefault("input_size", list(input_size))
        cfg = NetworkConfig.from_dict(values)
    else:
        cfg = NetworkConfig(input_size=input_size)
    if args.no_nrc:
        cfg = cfg.replace(nrc_enabled=False)
    if args.rrc_mode:
        cfg = cfg.replace(rrc_mode=RRC_INDICES_PLUS_ADD if args.rrc_mode == "indices-add" else RRC_INDICES)
    return cfg


def _train_config(args, dataset):
    if not len(dataset):
        raise DataError(f"no samples found in {args.data}")
    network = _network_config(args, dataset.image_shape)
    return TrainConfig(learning_rate=args.lr, momentum=args.momentum, batch_size=args.batch,
                       epochs=args.epochs, seed=args.seed, network=network)


def cmd_train(args):
    ds = D.load_dataset(args.data)
    cfg = _train_config(args, ds)
    if ds.split is None:
        ds = ds.with_split(D.split_dataset(ds, D.Rng(args.seed)))

    def progress(entry):
        print(f"epoch {entry.epoch:3d}  loss {entry.mean_loss:.6g}  train dsc {entry.train_dsc:.4f}")

    ckpt, history = run_training(ds, cfg, progress=progress)
    save_checkpoint(args.out, ckpt)
    if args.log:
        write_log_csv(args.log, history)
    return EXIT_OK


def cmd_eval(args):
    ckpt = load_checkpoint(args.model)
    ds = D.load_dataset(args.data)
    if args.split == "all":
        samples = ds.samples
    else:
        if ds.split is None:
            raise UsageError(f"{args.data} has no manifest.csv; use --split all")
        samples = ds.subset(args.split)
    report = evaluate(ckpt, samples)
    Path(args.report).write_text(LM.reports_to_csv([report]))
    print(f"{args.split}: avg {report.average:.4f} max {report.maximum:.4f} min {report.minimum:.4f}")
    return EXIT_OK


def cmd_infer(args):
    if (args.truth is None) != (args.overlay is None):
        raise UsageError("--truth and --overlay must be given together")
    ckpt = load_checkpoint(args.model)
    image = D.read_pgm(args.image)
    if image.shape != ckpt.config.input_size:
        raise ShapeError(f"image is {image.shape}, model expects {ckpt.config.input_size}")
    pred = LM.binarize(predict_proba(ckpt, image[None, None]))[0]
    D.write_pgm(pred, args.out)
    if args.truth:
        truth = D.read_mask(args.truth)
        if truth.shape != image.shape:
            raise ShapeError(f"truth mask is {truth.shape}, image is {image.shape}")
        D.write_ppm(render_overlay(image, pred, truth), args.overlay)
        print(f"dsc {LM.dsc(pred, truth):.4f}")
    return EXIT_OK


def gradcheck_suite(tolerance=1e-4, seed=0):
    """Finite-difference checks of every backward kernel plus a whole network.

    Yields ``(label, GradcheckReport)`` pairs.
    """
    rng = D.Rng(seed)

    def uniform(*shape):
        return rng.uniform_array(int(np.prod(shape))).reshape(shape) * 2.0 - 1.0

    x = uniform(1, 2, 4, 4)
    w = uniform(3, 2, 3, 3)
    b = uniform(3)

    def conv_bwd(g, x, w, b):
        gx, gw, gb = K.conv2d_backward(x, w, g)
        return {"x": gx, "w": gw, "b": gb}

    yield "conv2d", K.gradcheck(lambda x, w, b: K.conv2d_forward(x, w, b), conv_bwd,
                                {"x": x, "w": w, "b": b}, tolerance=tolerance, seed=seed)

    xb = uniform(2, 2, 3, 3)

    def bn_state(gamma, beta):
        return K.BnState(gamma, beta, np.zeros(2), np.ones(2))

    def bn_bwd(g, x, gamma, beta):
        gx, gg, gb = K.batchnorm_backward(x, bn_state(gamma, beta), g)
        return {"x": gx, "gamma": gg, "beta": gb}

    yield "batchnorm", K.gradcheck(
        lambda x, gamma, beta: K.batchnorm_forward(x, bn_state(gamma, beta), True), bn_bwd,
        {"x": xb, "gamma": 1.0 + 0.5 * uniform(2), "beta": uniform(2)}, tolerance=tolerance, seed=seed)

    xr = uniform(2, 3, 8, 8)
    yield "relu", K.gradcheck(lambda x: K.relu(x), lambda g, x: {"x": K.relu_backward(x, g)},
                              {"x": xr}, tolerance=tolerance, seed=seed,
                              masks={"x": np.abs(xr) >= 1e-3})

    def add_bwd(g, a, b):
        ga, gb = K.residual_add_backward(g)
        return {"a": ga, "b": gb}

    yield "residual_add", K.gradcheck(lambda a, b: K.residual_add(a, b), add_bwd,
                                      {"a": uniform(2, 3, 4, 4), "b": uniform(2, 3, 4, 4)},
                                      tolerance=tolerance, seed=seed)

    xp = uniform(2, 3, 4, 4)
    _, idx = K.maxpool2d(xp)
    yield "maxpool2d", K.gradcheck(lambda x: K.maxpool2d(x)[0],
                                   lambda g, x: {"x": K.maxpool2d_backward(g, idx, 4, 4)},
                                   {"x": xp}, tolerance=tolerance, seed=seed)

    z = uniform(2, 2, 4, 4)
    mask = (rng.uniform_array(32).reshape(2, 4, 4) < 0.4).astype(np.uint8)
    weights = LM.class_weights(mask)
    scale = float(mask.size)

    def ce_fwd(z):
        return np.array(scale * LM.weighted_ce(K.softmax_pixelwise(z), mask, weights))

    def ce_bwd(g, z):
        p = K.softmax_pixelwise(z)
        return {"z": K.softmax_backward(p, float(g) * scale * LM.weighted_ce_grad(p, mask, weights))}

    yield "softmax+weighted_ce", K.gradcheck(ce_fwd, ce_bwd, {"z": z}, tolerance=tolerance, seed=seed)

    yield "network(widths=[3], 8x8)", _network_gradcheck(seed, max(tolerance, 1e-3))


def _network_gradcheck(seed, tolerance):
    from .model import backward

    cfg = NetworkConfig(input_size=(8, 8), widths=(3,), conv_counts=(2,))
    net = build_network(cfg)
    template = init_params(cfg, seed)
    rng = D.Rng(seed + 1)
    x = rng.uniform_array(128).reshape(2, 1, 8, 8)
    mask = (rng.uniform_array(128).reshape(2, 8, 8) < 0.3).astype(np.uint8)
    weights = LM.class_weights(mask)
    scale = float(mask.size) ** 2

    def store(values):
        s = template.copy()
        for name, v in values.items():
            s.params[name][...] = v
        return s

    def fwd(**values):
        probs, _ = forward(net, store(values), x, training=True)
        return np.array(scale * LM.weighted_ce(probs, mask, weights))

    def bwd(g, **values):
        s = store(values)
        probs, trace = forward(net, s, x, training=True)
        backward(net, s, trace, float(g) * scale * LM.weighted_ce_grad(probs, mask, weights))
        return {n: s.grads[n].copy() for n in s.names()}

    inputs = {n: template[n].copy() for n in template.names()}
    return K.gradcheck(fwd, bwd, inputs, tolerance=tolerance, seed=seed)


def cmd_gradcheck(args):
    start = time.perf_counter()
    ok = True
    for label, report in gradcheck_suite(args.tolerance, args.seed):
        worst = max(report.errors.values())
        status = "PASS" if report.passed else "FAIL"
        print(f"{status} {label:26s} max rel err {worst:.3e} (tol {report.tolerance:.0e})")
        ok &= report.passed
    print(f"gradcheck {'passed' if ok else 'FAILED'} in {time.perf_counter() - start:.1f}s")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_ablate(args):
    ds = D.load_dataset(args.data)
    cfg = _train_config(args, ds)

    def progress(k, nrc, report):
        print(f"run {k} nrc={'on ' if nrc else 'off'} avg dsc {report.average:.4f}", flush=True)

    result = run_ablation(ds, cfg, runs=args.runs, progress=progress)
    write_ablation(args.out_dir, result)
    print(f"mean DSC with NRC {result.mean_on:.4f}, without {result.mean_off:.4f}, "
          f"difference {result.difference:+.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--config", help="network config as a JSON file path or inline JSON object")
    p.add_argument("--lr", type=float, default=0.0005)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-nrc", action="store_true", help="disable neighbouring residual connections")
    p.add_argument("--rrc-mode", choices=["indices", "indices-add"],
                   help="remote connection: unpooling indices only, or indices plus feature-map addition")


def build_parser():
    parser = _Parser(prog="segtrus", description="Residual FCN segmentation on speckle phantoms.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write synthetic phantoms, masks and a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a network and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="per-epoch CSV log (epoch,mean_loss,train_dsc)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="DSC report of a checkpoint on a dataset split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["test", "train", "all"], default="test")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "infer", help="segment one image",
        description="Writes the segmentation (foreground 255, background 0). With --truth, also "
                    "writes an overlay PPM: predicted boundary red, ground-truth boundary green, "
                    "shared boundary yellow.")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--truth")
    p.add_argument("--overlay")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train/test with and without NRC over several random splits")
    p.add_argument("--data", required=True)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--out-dir", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if "usage:" not in str(exc):
            print(parser.format_usage(), file=sys.stderr, end="")
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, DataError, ShapeError, SegtrusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
