"""Command-line entry point: prepare, train, eval, upscale, gradcheck, params."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import data as D
from .evaluate import evaluate_dataset, self_ensemble
from .model import ModelConfig, count_params, init_params, load_weights, param_breakdown, predict, save_weights
from .train import TrainConfig, load_checkpoint, strict_determinism, train_loop

log = logging.getLogger("rnan")

_PATH_KEYS = {"train_root": "", "train_manifest": "", "out": "runs/default"}


def _schema() -> dict[str, type]:
    out: dict[str, type] = {}
    for cls in (ModelConfig, TrainConfig):
        for f in fields(cls):
            out[f.name] = {"int": int, "float": float, "str": str}.get(str(f.type), type(f.default))
    out.update({k: str for k in _PATH_KEYS})
    return out


@dataclass
class RunConfig:
    """Flat merged view of model, training and path settings."""

    values: dict[str, object] = field(default_factory=dict)

    @classmethod
    def from_sources(cls, path: str | None, overrides: dict[str, str]) -> "RunConfig":
        raw: dict[str, str] = {}
        if path:
            raw.update(parse_kv_file(path))
        raw.update(overrides)
        schema = _schema()
        values: dict[str, object] = {}
        for key, text in raw.items():
            if key not in schema:
                raise ValueError(f"unknown config key {key!r}; known keys: {', '.join(sorted(schema))}")
            try:
                values[key] = schema[key](text)
            except ValueError:
                raise ValueError(f"config key {key!r}: cannot parse {text!r} as {schema[key].__name__}") from None
        return cls(values)

    def model(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in self.values.items() if k in names})

    def train(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.values.items() if k in names})

    def path(self, key: str) -> str:
        return str(self.values.get(key, _PATH_KEYS[key]))


def parse_kv_file(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for key in ("scale", "seed", "out"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = str(val)
    return out


# --------------------------------------------------------------------------
# inference helpers


def tiled_predict(model_fn: Callable[[np.ndarray], np.ndarray], lr: np.ndarray, scale: int, tile: int, overlap: int = 8):
    """Run ``model_fn`` on overlapping LR tiles and average where the kept parts overlap.

    Each tile is padded by ``overlap`` LR pixels of context; only the part at
    least ``overlap // 2`` pixels inside an artificial tile edge is kept, so
    neighbouring tiles share a band of ``overlap`` pixels that is averaged.
    """
    _, h, w = lr.shape
    if tile <= 0 or (tile >= h and tile >= w):
        return model_fn(lr)
    half = overlap // 2
    acc = np.zeros((3, h * scale, w * scale))
    cnt = np.zeros((1, h * scale, w * scale))
    for y in range(0, h, tile):
        for x in range(0, w, tile):
            y0, x0 = max(0, y - overlap), max(0, x - overlap)
            y1, x1 = min(h, y + tile + overlap), min(w, x + tile + overlap)
            out = model_fn(lr[:, y0:y1, x0:x1])
            # kept window, in LR coordinates
            ky0, kx0 = max(0, y - half), max(0, x - half)
            ky1, kx1 = min(h, y + tile + half), min(w, x + tile + half)
            sub = out[:, (ky0 - y0) * scale : (ky1 - y0) * scale, (kx0 - x0) * scale : (kx1 - x0) * scale]
            acc[:, ky0 * scale : ky1 * scale, kx0 * scale : kx1 * scale] += sub
            cnt[:, ky0 * scale : ky1 * scale, kx0 * scale : kx1 * scale] += 1
    return acc / cnt


def _model_fn(weights_arg: str, scale: int | None):
    if weights_arg == "bicubic":
        if scale is None:
            raise ValueError("--scale is required with the bicubic model")
        return (lambda x: D.bicubic_upscale(x, scale)), scale
    weights = load_weights(weights_arg)
    if scale is not None and scale != weights.config.scale:
        raise ValueError(f"--scale {scale} does not match the weights' scale {weights.config.scale}")
    return (lambda x: predict(weights, x)), weights.config.scale


# --------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    manifests = D.prepare(args.hr_dir, args.out_dir, args.scales)
    for s, m in sorted(manifests.items()):
        print(f"x{s}: {m}")
    return 0


def cmd_train(args) -> int:
    rc = RunConfig.from_sources(args.config, _overrides(args))
    mcfg, tcfg = rc.model(), rc.train()
    manifest = rc.path("train_manifest") or str(Path(rc.path("train_root")) / f"manifest_x{mcfg.scale}.txt")
    pairs = D.PairSet.load(D.read_manifest(manifest, mcfg.scale, tcfg.seed))
    out = Path(rc.path("out"))
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        if resume.weights.config != mcfg:
            raise ValueError(f"checkpoint config {resume.weights.config} differs from run config {mcfg}")
        weights = resume.weights
    else:
        weights = init_params(mcfg, seed=tcfg.seed, dtype=tcfg.precision)
    result = train_loop(weights, pairs, tcfg, out_dir=out, resume=resume)
    save_weights(result.weights, out / "final.rnanw")
    print(f"trained {result.step} steps; weights -> {out / 'final.rnanw'}")
    return 0


def cmd_eval(args) -> int:
    model_fn, scale = _model_fn(args.weights, args.scale)
    try:
        items = D.load_eval_set(args.data, scale)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.tile:
        base = model_fn
        model_fn = lambda x: tiled_predict(base, x, scale, args.tile, args.overlap)  # noqa: E731
    report = evaluate_dataset(
        model_fn, items, scale, use_ensemble=args.ensemble, shave=args.shave, dataset=Path(args.data).name
    )
    print(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0


def cmd_upscale(args) -> int:
    model_fn, scale = _model_fn(args.weights, args.scale)
    img = D.load_png(args.input)
    if img.channels == 1:
        img = D.ImageU8(np.repeat(img.pixels, 3, axis=2), img.name)
    x = np.ascontiguousarray(img.to_float().transpose(2, 0, 1))

    def run(t):
        return tiled_predict(model_fn, t, scale, args.tile, args.overlap)

    out = self_ensemble(run, x) if args.ensemble else run(x)
    D.save_png(D.ImageU8(D.quantize(np.transpose(out, (1, 2, 0)))), args.output)
    print(f"{img.width}x{img.height} -> {img.width * scale}x{img.height * scale}: {args.output}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import OP_CASES, model_grad_check, run_op_suite

    ok = True
    run_ops = bool(args.op) or not args.model_tiny
    if run_ops:
        ops = args.op or list(OP_CASES)
        for op, err in run_op_suite(ops, cases=args.cases, seed=args.seed or 0).items():
            passed = err < 1e-4
            ok &= passed
            print(f"{'PASS' if passed else 'FAIL'}  {op:24s} worst rel err {err:.3e}")
    if args.model_tiny:
        results = model_grad_check(n_params=10, seed=args.seed or 0)
        worst = max(r[4] for r in results)
        passed = worst < 1e-3
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  tiny model ({len(results)} weights) worst rel err {worst:.3e}")
    return 0 if ok else 1


def cmd_params(args) -> int:
    cfg = RunConfig.from_sources(args.config, _overrides(args)).model()
    for name, n in param_breakdown(cfg).items():
        print(f"{name:16s} {n:>12,d}")
    total = count_params(cfg)
    print(f"{'total':16s} {total:>12,d}  ({total / 1e6:.2f} M)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rnan", description="Residual neuron-attention super-resolution")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="bicubic-downscale an HR folder into LR_x{s} trees")
    sp.add_argument("hr_dir")
    sp.add_argument("out_dir")
    sp.add_argument("--scales", type=int, nargs="+", default=[2, 3, 4])
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train from a key = value config file")
    sp.add_argument("--config")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    sp.add_argument("--scale", type=int)
    sp.add_argument("--seed", type=int, help="overrides the config seed (default 0)")
    sp.add_argument("--out")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="Y-channel PSNR/SSIM on a prepared dataset")
    sp.add_argument("--weights", required=True, help="weight file, or 'bicubic'")
    sp.add_argument("--data", required=True, help="dataset root with HR/ (and LR_x{s}/)")
    sp.add_argument("--scale", type=int)
    sp.add_argument("--ensemble", action="store_true", help="8-way geometric self-ensemble")
    sp.add_argument("--shave", type=int, help="border pixels to ignore (default: scale)")
    sp.add_argument("--tile", type=int, default=0)
    sp.add_argument("--overlap", type=int, default=8)
    sp.add_argument("--csv")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("upscale", help="super-resolve one PNG")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--weights", required=True, help="weight file, or 'bicubic'")
    sp.add_argument("--scale", type=int)
    sp.add_argument("--ensemble", action="store_true")
    sp.add_argument("--tile", type=int, default=0, help="LR tile size; 0 = whole image")
    sp.add_argument("--overlap", type=int, default=8)
    sp.set_defaults(func=cmd_upscale)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    sp.add_argument("--op", action="append", help="restrict to this op (repeatable)")
    sp.add_argument("--model-tiny", action="store_true", help="check a tiny end-to-end network")
    sp.add_argument("--cases", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("params", help="parameter count per submodule")
    sp.add_argument("--config")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--scale", type=int)
    sp.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with strict_determinism():
            return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
