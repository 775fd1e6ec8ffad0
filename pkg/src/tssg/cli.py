"""``tssg`` command line: decompose, synth, train, infer, eval.

Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines, then command-line flags. The effective settings are
written as ``effective_config.txt`` next to each command's outputs; passing
that file back through ``--config`` replays the run.
"""
from __future__ import annotations

import argparse
import contextlib
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import dataio, pipeline
from .dataio import DataError
from .metrics import MetricReport, evaluate_dataset
from .pipeline import PipelineCheckpointSet, PipelineError, TrainConfig
from .segnet import MINIATURE_WIDTHS
from .stexdecomp import DecompositionConfig

ECHO_NAME = "effective_config.txt"


class UsageError(Exception):
    """Bad invocation; exit status 2."""


def _ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError:
        raise ValueError(f"expected comma-separated integers, got {text!r}") from None


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


@dataclass
class RunConfig:
    """Every configurable setting with its default."""

    seed: int = 0
    deterministic: bool = False
    # training
    epochs: int = 20
    batch_size: int = 2
    learning_rate: float = 1e-3
    augment: bool = True
    augment_multiplier: int = 2
    validation_fraction: float = 0.1
    # network
    encoder_widths: tuple = MINIATURE_WIDTHS
    convs_per_block: tuple = (2, 2, 3, 3, 3)
    # decomposition
    window_radius: int = 3
    eps_s: float = 1e-4
    smoothing_eps: float = 4e-4
    iterations: int = 4

    _PARSERS = {"deterministic": _bool, "augment": _bool, "encoder_widths": _ints, "convs_per_block": _ints}

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def set(self, key: str, text: str) -> None:
        if key not in self.keys():
            raise UsageError(f"unknown config key {key!r}")
        parse = self._PARSERS.get(key) or type(getattr(RunConfig, key))
        try:
            setattr(self, key, parse(text.strip()))
        except ValueError as exc:
            raise UsageError(f"config key {key}: {exc}") from None

    def to_text(self) -> str:
        out = []
        for key in self.keys():
            v = getattr(self, key)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{key} = {v}")
        return "\n".join(out) + "\n"

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.seed,
                           self.augment_multiplier, self.augment, self.validation_fraction)

    def decomposition_config(self) -> DecompositionConfig:
        return DecompositionConfig(self.window_radius, self.eps_s, self.smoothing_eps, self.iterations)

    def validate(self) -> None:
        try:
            self.train_config()
            self.decomposition_config()
            pipeline.make_stage_spec("roi", self.encoder_widths, self.convs_per_block)
        except ValueError as exc:
            raise UsageError(str(exc)) from None


def read_config(path) -> RunConfig:
    cfg = RunConfig()
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg.set(key, value)
    return cfg


def effective_config(args) -> RunConfig:
    cfg = read_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    cfg.validate()
    return cfg


def echo_config(cfg: RunConfig, run_dir) -> None:
    d = Path(run_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / ECHO_NAME).write_text(cfg.to_text(), encoding="utf-8")


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    return p


# ---------------------------------------------------------------------------
# subcommands


def cmd_decompose(args, cfg: RunConfig) -> int:
    from .stexdecomp import decompose

    image = dataio.load_image(_require(args.input))
    res = decompose(image, cfg.decomposition_config())
    stem = Path(args.out_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    dataio.save_image(res.structure, f"{stem}.structure.png")
    dataio.save_image(np.clip(res.texture + 0.5, 0.0, 1.0), f"{stem}.texture.png")
    if args.raw:
        dataio.save_raw_plane(res.structure, f"{stem}.structure.f32")
        dataio.save_raw_plane(res.texture, f"{stem}.texture.f32")
    residual = float(np.max(np.abs(res.structure + res.texture - image.astype(np.float64))))
    echo_config(cfg, stem.parent)
    print(f"residual {residual:.3e}")
    return 0


def cmd_synth(args, cfg: RunConfig) -> int:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    if not 0 <= args.test_count <= args.n:
        raise UsageError(f"--test-count must lie in [0, {args.n}]")
    manifest = dataio.generate_synthetic_dataset(args.n, cfg.seed, args.out_dir, test_count=args.test_count)
    echo_config(cfg, args.out_dir)
    print(f"wrote {len(manifest)} samples and {Path(args.out_dir) / 'manifest.tsv'}")
    return 0


def _upstream_predictions(stage: str, samples, upstream_dir, dcfg) -> dict:
    needs = pipeline.UPSTREAM[stage]
    if not needs or upstream_dir is None:
        return {}
    images = [s.image for s in samples]
    preds: dict = {}
    for up in needs:
        path = _require(Path(upstream_dir) / PipelineCheckpointSet.filename(up))
        spec, params, _ = pipeline.load_stage(path, up)
        inputs = [{k: preds[k][i] for k in preds} for i in range(len(samples))]
        preds[up], _ = pipeline.predict(params, spec, images, inputs, dcfg)
    return preds


def cmd_train(args, cfg: RunConfig) -> int:
    manifest = dataio.read_manifest(_require(args.manifest)).split("train")
    if not len(manifest):
        raise PipelineError(f"{args.manifest}: no train records")
    samples = pipeline.load_samples(manifest)
    tcfg, dcfg = cfg.train_config(), cfg.decomposition_config()
    out = Path(args.out)

    def emit(line: str, log_fh):
        print(line, flush=True)
        log_fh.write(line + "\n")
        log_fh.flush()

    if args.stage == "all":
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "train.log", "w", encoding="utf-8") as log_fh:
            ckpts, _ = pipeline.train_pipeline(
                samples, tcfg, cfg.encoder_widths, dcfg,
                on_epoch=lambda stage, e: emit(f"{stage},{e.line()}", log_fh),
            )
        ckpts.save(out)
        echo_config(cfg, out)
        return 0

    spec = pipeline.make_stage_spec(args.stage, cfg.encoder_widths, cfg.convs_per_block)
    upstream = _upstream_predictions(args.stage, samples, args.upstream, dcfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out.with_suffix(".log"), "w", encoding="utf-8") as log_fh:
        result = pipeline.train_stage(spec, samples, tcfg, upstream, dcfg, on_epoch=lambda e: emit(e.line(), log_fh))
    pipeline.save_stage(out, spec, result.params, tcfg, pipeline.data_fingerprint(samples))
    echo_config(cfg, out.parent)
    return 0


def overlay(image: np.ndarray, multiclass: np.ndarray) -> np.ndarray:
    """Class colours blended at 50 % over the grayscale input; uint8 RGB."""
    gray = np.repeat(np.clip(image, 0, 1)[..., None] * 255.0, 3, axis=2)
    color = dataio.encode_multiclass(multiclass).astype(np.float64)
    out = np.where((multiclass > 0)[..., None], 0.5 * gray + 0.5 * color, gray)
    return np.round(out).astype(np.uint8)


def cmd_infer(args, cfg: RunConfig) -> int:
    from PIL import Image

    src = _require(args.input)
    if src.suffix == ".tsv":
        items = [(r.stem, r.image) for r in dataio.read_manifest(src)]
    else:
        items = [(src.stem, src)]
    ckpts = PipelineCheckpointSet.load(_require(args.ckpt_dir))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = {name: dataio.load_image(p) for name, p in items}
    # equal-sized images share batches; outputs are still written in input order
    by_shape: dict = {}
    for name, _ in items:
        by_shape.setdefault(images[name].shape, []).append(name)
    results = {}
    for names in by_shape.values():
        outs = pipeline.run_pipeline_batch([images[n] for n in names], ckpts, cfg.decomposition_config())
        results.update(zip(names, outs))
    for name, _ in items:
        r = results[name]
        dataio.save_binary_mask(r.roi_mask, out / f"{name}_roi.png")
        dataio.save_binary_mask(r.binary_mask, out / f"{name}_binary.png")
        dataio.save_multiclass_mask(r.multiclass_mask, out / f"{name}_multiclass.png")
        Image.fromarray(overlay(images[name], r.multiclass_mask)).save(out / f"{name}_overlay.png")
        if args.probs:
            dataio.save_raw_plane(r.binary_prob, out / f"{name}_binary_prob.f32")
    echo_config(cfg, out)
    print(f"wrote predictions for {len(items)} image(s) to {out}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    manifest = dataio.read_manifest(_require(args.manifest))
    if args.split != "all":
        manifest = manifest.split(args.split)
    kind = args.mode
    pred_dir = _require(args.pred_dir)
    records = [r for r in manifest if r.mask_path(kind) is not None]
    if not records:
        raise DataError(f"{args.manifest}: no records with {kind} masks in split {args.split}")
    missing = [str(pred_dir / f"{r.stem}_{kind}.png") for r in records if not (pred_dir / f"{r.stem}_{kind}.png").exists()]
    if missing:
        shown = ", ".join(missing[:5]) + ("" if len(missing) <= 5 else f" and {len(missing) - 5} more")
        raise DataError(f"{len(missing)} prediction(s) missing: {shown}")
    pairs = []
    for r in records:
        pred = dataio.load_mask(pred_dir / f"{r.stem}_{kind}.png", kind)
        gt = dataio.load_mask(r.mask_path(kind), kind)
        prob_path = pred_dir / f"{r.stem}_binary_prob.f32"
        if kind == "binary" and not args.binarized_mae and prob_path.exists():
            pairs.append((r.stem, pred, gt, dataio.load_raw_plane(prob_path)))
        else:
            pairs.append((r.stem, pred, gt))
    report: MetricReport = evaluate_dataset(pairs, kind)
    text = report.to_csv()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
        echo_config(cfg, Path(args.out).parent)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    def global_flags(p, default):
        # sub-commands repeat the global flags with suppressed defaults so a
        # flag given before the sub-command is not reset by it
        p.add_argument("--config", default=default, help="key = value settings file")
        p.add_argument("--seed", type=_u64, default=default, help="random seed (overrides the config file)")
        p.add_argument("--deterministic", action="store_true", default=default or False,
                       help="single-threaded numerics for bitwise reruns")

    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="tssg", description="Two-stream lung-infection segmentation toolkit.")
    global_flags(parser, None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", parents=[common], help="split an image into structure and texture")
    p.add_argument("input")
    p.add_argument("out_stem", help="writes <stem>.structure.png and <stem>.texture.png")
    p.add_argument("--raw", action="store_true", help="also write float32 raw planes")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("out_dir")
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--test-count", type=int, default=0, help="how many of them form the test split")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train one stage or the whole pipeline")
    p.add_argument("--stage", required=True, choices=pipeline.STAGES + ("all",))
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint file, or a directory for --stage all")
    p.add_argument("--upstream", help="directory with earlier stages' checkpoints")
    p.add_argument("--epochs", type=int, help="override the configured epoch count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="run the three stages on an image or manifest")
    p.add_argument("input", help="image file or manifest .tsv")
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--probs", action="store_true", help="also write foreground probability planes")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score predictions against a manifest")
    p.add_argument("pred_dir")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("binary", "multiclass"), default="binary")
    p.add_argument("--split", choices=("train", "test", "all"), default="all")
    p.add_argument("--out", help="also write the CSV here")
    p.add_argument("--binarized-mae", action="store_true", help="MAE on the binary masks even if probabilities exist")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = effective_config(args)
        limit = threadpool_limits(1) if cfg.deterministic else contextlib.nullcontext()
        with limit:
            return args.func(args, cfg)
    except UsageError as exc:
        print(f"tssg: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        msg = str(exc) if not exc.filename else f"no such file: {exc.filename}"
        print(f"tssg: error: {msg}", file=sys.stderr)
        return 2
    except (DataError, PipelineError, ValueError, OSError) as exc:
        print(f"tssg: error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
