"""sonarseg command line: gen-data, train, eval, segment, bench, verify, params.

Values are layered: built-in defaults < --config file (JSON or YAML) < flags.
The effective configuration is echoed to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_USER, EXIT_VERIFY = 0, 1, 2

DEFAULTS = {
    "gen-data": dict(out="data", height=512, width=512, count=4, seed=0,
                     class_mix="0.506,0.139,0.1206,0.2344", test_fraction=0.05),
    "train": dict(preset="ours", data=None, out="runs/train", epochs=30, batch=8, lr=6e-5,
                  weight_decay=1e-2, warmup=3, poly_power=0.9, seed=0, class_weights="auto",
                  augment=True, threads=0, target_train_acc=None),
    "eval": dict(checkpoint=None, data=None, split="test", output="metrics.json", bench_iters=5, threads=0),
    "segment": dict(checkpoint=None, input=None, output="mask.png", overlay=None, oracle_mask=None, threads=0),
    "bench": dict(preset="ours", device_note="", iters=20, warmup=3, size=256, threads=1, seed=0),
    "verify": dict(tolerance=1e-3),
    "params": dict(preset=None),
}


class UserError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def build_parser():
    p = Parser(prog="sonarseg", description=__doc__.splitlines()[0])
    p.add_argument("--config", default=None, help="JSON/YAML file with option values")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)
    S = argparse.SUPPRESS

    g = sub.add_parser("gen-data", help="write a synthetic tiled dataset")
    g.add_argument("--out", default=S, help="dataset directory")
    g.add_argument("--height", type=int, default=S)
    g.add_argument("--width", type=int, default=S)
    g.add_argument("--count", type=int, default=S, help="number of waterfalls")
    g.add_argument("--seed", type=int, default=S)
    g.add_argument("--class-mix", default=S, help="four comma-separated fractions")
    g.add_argument("--test-fraction", type=float, default=S)

    t = sub.add_parser("train", help="train a model, write checkpoint.pt and history.json")
    t.add_argument("--preset", default=S)
    t.add_argument("--data", default=S, help="dataset directory from gen-data")
    t.add_argument("--out", default=S, help="output directory")
    t.add_argument("--epochs", type=int, default=S)
    t.add_argument("--batch", type=int, default=S)
    t.add_argument("--lr", type=float, default=S)
    t.add_argument("--weight-decay", type=float, default=S)
    t.add_argument("--warmup", type=int, default=S, help="warmup epochs")
    t.add_argument("--poly-power", type=float, default=S)
    t.add_argument("--seed", type=int, default=S)
    t.add_argument("--class-weights", default=S, help="'auto' or four comma-separated weights")
    t.add_argument("--no-augment", dest="augment", action="store_false", default=S)
    t.add_argument("--target-train-acc", type=float, default=S, help="stop early at this train accuracy")
    t.add_argument("--threads", type=int, default=S, help="torch threads (0 = library default)")

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split, write metrics.json")
    e.add_argument("--checkpoint", default=S)
    e.add_argument("--data", default=S)
    e.add_argument("--split", choices=("train", "val", "test"), default=S)
    e.add_argument("--output", default=S)
    e.add_argument("--bench-iters", type=int, default=S, help="timed iterations for fps (0 skips)")
    e.add_argument("--threads", type=int, default=S)

    s = sub.add_parser("segment", help="segment a waterfall PNG into a mask PNG and overlay")
    s.add_argument("--checkpoint", default=S)
    s.add_argument("--input", default=S, help="grayscale waterfall PNG")
    s.add_argument("--output", default=S, help="mask PNG to write")
    s.add_argument("--overlay", default=S, help="overlay PNG (default: <output>_overlay.png)")
    s.add_argument("--oracle-mask", default=S,
                   help="use tiles of this mask instead of model predictions (checks tiling/stitching)")
    s.add_argument("--threads", type=int, default=S)

    b = sub.add_parser("bench", help="single-image throughput, JSON on stdout")
    b.add_argument("--preset", default=S)
    b.add_argument("--device-note", default=S)
    b.add_argument("--iters", type=int, default=S)
    b.add_argument("--warmup", type=int, default=S)
    b.add_argument("--size", type=int, default=S)
    b.add_argument("--threads", type=int, default=S)
    b.add_argument("--seed", type=int, default=S)

    v = sub.add_parser("verify", help="gradient checks and invariant suite")
    v.add_argument("--tolerance", type=float, default=S)

    pa = sub.add_parser("params", help="parameter counts against the reported values")
    pa.add_argument("--preset", default=S)
    return p


def load_config_file(path):
    path = Path(path)
    if not path.exists():
        raise UserError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml
        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise UserError(f"{path}: expected a mapping")
    return data


def effective_options(args):
    opts = dict(DEFAULTS[args.command])
    if args.config:
        data = load_config_file(args.config)
        section = data.get(args.command, data)
        for k, val in section.items():
            key = k.replace("-", "_")
            if key not in opts:
                raise UserError(f"unknown option {k!r} in {args.config} for {args.command}")
            opts[key] = val
    for k, val in vars(args).items():
        if k in opts:
            opts[k] = val
    return opts


def _floats(text, n, what):
    if isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        try:
            vals = [float(v) for v in str(text).split(",")]
        except ValueError:
            raise UserError(f"{what}: expected {n} comma-separated numbers, got {text!r}") from None
    if len(vals) != n:
        raise UserError(f"{what}: expected {n} values, got {len(vals)}")
    return vals


def _set_threads(n):
    if n:
        import torch
        torch.set_num_threads(n)


def _need(opts, *keys):
    for k in keys:
        if opts.get(k) in (None, ""):
            raise UserError(f"--{k.replace('_', '-')} is required")


def cmd_gen_data(o):
    from .data import write_dataset
    mix = _floats(o["class_mix"], 4, "--class-mix")
    m = write_dataset(o["out"], count=o["count"], height=o["height"], width=o["width"],
                      seed=o["seed"], class_mix=mix, test_fraction=o["test_fraction"])
    print(json.dumps({"out": str(o["out"]), "tiles": len(m.tiles), "counts": m.counts(),
                      "class_frequency": m.class_frequency}))
    return EXIT_OK


def cmd_train(o):
    from .data import load_split, read_manifest
    from .model import build_model, preset, save_checkpoint
    from .training import TrainConfig, train

    _set_threads(o["threads"])
    cfg = preset(o["preset"])
    cw = o["class_weights"]
    cw = cw if cw == "auto" else _floats(cw, cfg.num_classes, "--class-weights")
    tc = TrainConfig(epochs=o["epochs"], batch_size=o["batch"], base_lr=o["lr"],
                     weight_decay=o["weight_decay"], warmup_epochs=o["warmup"],
                     poly_power=o["poly_power"], seed=o["seed"], class_weights=cw,
                     augment=bool(o["augment"]), target_train_acc=o["target_train_acc"])
    model = build_model(cfg, seed=o["seed"])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)

    history = []
    freq = None
    if tc.epochs > 0:
        _need(o, "data")
        images, masks = load_split(o["data"], "train")
        if len(images) == 0:
            raise UserError(f"{o['data']}: no training tiles")
        val = load_split(o["data"], "val")
        freq = read_manifest(o["data"]).class_frequency or None
        kw = {"class_frequency": freq} if freq else {}
        state, history = train(model, images, masks, tc, val=val, **kw)
        model.load_state_dict(state)
    save_checkpoint(model, out / "checkpoint.pt", extra={"train_config": tc.to_dict(), "preset": o["preset"]})
    (out / "history.json").write_text(json.dumps(history, indent=2))
    (out / "config.json").write_text(json.dumps(o, indent=2, default=str))
    print(json.dumps({"checkpoint": str(out / "checkpoint.pt"), "epochs_run": len(history)}))
    return EXIT_OK


def cmd_eval(o):
    from .data import load_split
    from .model import load_checkpoint
    from .training import benchmark_throughput, evaluate

    _need(o, "checkpoint", "data")
    _set_threads(o["threads"])
    model, _ = load_checkpoint(o["checkpoint"])
    images, masks = load_split(o["data"], o["split"])
    if len(images) == 0:
        raise UserError(f"split {o['split']!r} of {o['data']} is empty")
    report = evaluate(model, images, masks)
    if o["bench_iters"]:
        report.fps = benchmark_throughput(model, (1, 1) + images.shape[1:], 1, o["bench_iters"], threads=0)
    Path(o["output"]).parent.mkdir(parents=True, exist_ok=True)
    Path(o["output"]).write_text(json.dumps(report.to_dict(), indent=2))
    print(json.dumps({"miou": report.miou, "pixel_accuracy": report.pixel_accuracy, "output": o["output"]}))
    return EXIT_OK


def segment_waterfall(image, predict_tile):
    """Tile `image`, label each tile with `predict_tile(tile, origin)`, stitch back."""
    from .data import stitch_masks, tile_waterfall
    tiles = [(predict_tile(t, origin), origin) for t, _, origin in tile_waterfall(image)]
    return stitch_masks(tiles, image.shape)


def cmd_segment(o):
    from PIL import Image
    from .data import TILE, load_image, load_mask, overlay, save_mask

    _need(o, "input")
    inp = Path(o["input"])
    if not inp.exists():
        raise UserError(f"input not found: {inp}")
    image = load_image(inp)
    if min(image.shape) < TILE:
        raise UserError(f"{inp}: waterfall must be at least {TILE}x{TILE}, got {image.shape}")

    if o["oracle_mask"]:
        ref = load_mask(o["oracle_mask"])
        if ref.shape != image.shape:
            raise UserError("oracle mask and input differ in size")
        predict = lambda t, org: ref[org[0]:org[0] + TILE, org[1]:org[1] + TILE]  # noqa: E731
    else:
        _need(o, "checkpoint")
        from .model import load_checkpoint
        from .training import predict as predict_batch
        _set_threads(o["threads"])
        model, _ = load_checkpoint(o["checkpoint"])
        predict = lambda t, org: predict_batch(model, t[None])[0]  # noqa: E731

    mask = segment_waterfall(image, predict)
    out = Path(o["output"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mask(out, mask)
    ov = Path(o["overlay"]) if o["overlay"] else out.with_name(out.stem + "_overlay.png")
    Image.fromarray(overlay(image, mask), mode="RGB").save(ov)
    print(json.dumps({"mask": str(out), "overlay": str(ov), "shape": list(mask.shape)}))
    return EXIT_OK


def cmd_bench(o):
    from .model import build_model, count_parameters
    from .training import benchmark_throughput
    model = build_model(o["preset"], seed=o["seed"])
    if o["size"] % 32:
        raise UserError("--size must be a multiple of 32")
    fps = benchmark_throughput(model, (1, 1, o["size"], o["size"]), o["warmup"], o["iters"], threads=o["threads"])
    print(json.dumps({"preset": o["preset"], "fps": fps, "params": count_parameters(model),
                      "input": [1, 1, o["size"], o["size"]], "threads": o["threads"],
                      "device_note": o["device_note"]}))
    return EXIT_OK


def cmd_verify(o):
    from .verify import run_all
    ok = True
    for c in run_all(o["tolerance"]):
        ok &= c.passed
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}" + (f"  [{c.detail}]" if c.detail else ""))
    print("verify:", "all checks passed" if ok else "FAILURES")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_params(o):
    from .model import PRESETS, REFERENCE_PARAMS, ablation_ladder, build_model, count_parameters, preset
    from .verify import within
    rows = [(n, PRESETS[n], REFERENCE_PARAMS[n]) for n in REFERENCE_PARAMS]
    rows += [(f"ablation {n}", c, r) for n, c, r in ablation_ladder()]
    if o["preset"]:
        cfg = preset(o["preset"])
        rows = [r for r in rows if r[1] == cfg][:1] or [(o["preset"], cfg, None)]
    for name, cfg, ref in rows:
        n = count_parameters(build_model(cfg))
        if ref is None:
            print(f"{name:28s} {n:>10,d}")
        else:
            verdict = "PASS" if within(n, ref) else "FAIL"
            print(f"{name:28s} {n:>10,d}  ref {ref:.2f}M  {100 * (n / (ref * 1e6) - 1):+6.1f}%  {verdict}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "segment": cmd_segment,
            "bench": cmd_bench, "verify": cmd_verify, "params": cmd_params}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = effective_options(args)
        print(json.dumps({"command": args.command, "options": opts}, default=str), file=sys.stderr)
        return COMMANDS[args.command](opts)
    except (UserError, ValueError, FileNotFoundError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"sonarseg {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
