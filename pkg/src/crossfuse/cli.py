"""Command-line entry point: train, eval, gradcheck, ablate, map, convert, synth."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kvtext
from .data import (
    CubeError,
    PatchDataset,
    SceneCube,
    extract_patches,
    load_cube,
    normalize,
    split_fixed,
    split_per_class,
    synth_scene,
    text_bands_to_cube,
    write_train_index,
)
from .gradcheck import TINY_CONFIG, check_model_gradients
from .model import CheckpointError, FusionModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import Metrics, NumericalError, TrainConfig, evaluate, train

log = logging.getLogger("crossfuse")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_GRADCHECK = 5


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass(frozen=True)
class RunManifest:
    """Everything that determines a training run."""

    hsi: str = ""
    lidar: str = ""
    labels: str = ""
    train_idx: str | None = None
    per_class: int | None = None
    test_limit: int | None = None
    out: str = "run"
    seed: int = 0
    stacks: int = 4
    embed: int = 128
    patch: int = 11
    dropout: float = 0.5
    activation: str = "relu"
    ln_eps: float = 1e-5
    lr: float = 5e-6
    epochs: int = 500
    batch: int = 64
    eval_every: int = 1
    single_modality: bool = False
    norm_stats: str = "scene"
    lidar_bands: str = "all"

    def validate(self) -> None:
        for name in ("hsi", "lidar", "labels"):
            if not getattr(self, name):
                raise kvtext.FieldError(name, "a raster path is required")
        if (self.train_idx is None) == (self.per_class is None):
            raise kvtext.FieldError("train_idx", "give exactly one of train_idx or per_class")
        if self.norm_stats not in ("scene", "train"):
            raise kvtext.FieldError("norm_stats", "must be 'scene' or 'train'")
        if self.lidar_bands not in ("all", "elevation"):
            raise kvtext.FieldError("lidar_bands", "must be 'all' or 'elevation'")
        if self.test_limit is not None and self.test_limit < 1:
            raise kvtext.FieldError("test_limit", "must be positive")
        self.train_config()

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.lr, epochs=self.epochs, batch_size=self.batch, seed=self.seed,
                           eval_every=self.eval_every)

    def model_config(self, hsi_channels: int, lidar_channels: int, n_classes: int) -> ModelConfig:
        return ModelConfig(
            n_stacks=self.stacks, embed_dim=self.embed, patch_size=self.patch, hsi_channels=hsi_channels,
            lidar_channels=lidar_channels, n_classes=n_classes, dropout_rate=self.dropout,
            activation=self.activation, ln_eps=self.ln_eps, seed=self.seed,
        )

    def dumps(self) -> str:
        return kvtext.dumps(dataclasses.asdict(self))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> RunManifest:
        return kvtext.to_dataclass(cls, kvtext.loads(Path(path).read_text()))


@dataclass
class PreparedData:
    cube: SceneCube
    dataset: PatchDataset
    n_classes: int


def prepare_data(m: RunManifest) -> PreparedData:
    """Load, split and normalize the rasters named by a manifest."""
    try:
        cube = load_cube(m.hsi, m.lidar, m.labels)
    except (OSError, CubeError) as exc:
        raise DataError(str(exc)) from exc
    if m.lidar_bands == "elevation":
        cube = dataclasses.replace(cube, lidar=cube.lidar[:, :, :1])
    n_classes = cube.n_classes
    try:
        ds = extract_patches(cube, m.patch)
        if m.train_idx is not None:
            ds = split_fixed(ds, m.train_idx)
        else:
            ds = split_per_class(ds, m.per_class, np.random.default_rng(m.seed))
    except (ValueError, OSError) as exc:
        raise DataError(str(exc)) from exc
    mask = None
    if m.norm_stats == "train":
        mask = np.zeros(cube.shape, dtype=bool)
        mask[ds.rows[ds.is_train], ds.cols[ds.is_train]] = True
    cube = normalize(cube, mask)
    split = ds.is_train
    ds = dataclasses.replace(extract_patches(cube, m.patch), is_train=split)
    if m.single_modality:
        ds = ds.with_hsi_as_lidar()
    return PreparedData(cube, ds, n_classes)


def _test_split(m: RunManifest, ds: PatchDataset) -> PatchDataset | None:
    test = ds.test
    if len(test) == 0:
        return None
    if m.test_limit is not None and len(test) > m.test_limit:
        rng = np.random.default_rng([m.seed, 1])
        test = test.subset(np.sort(rng.choice(len(test), m.test_limit, replace=False)))
    return test


@dataclass
class RunResult:
    model: FusionModel
    train_metrics: Metrics
    test_metrics: Metrics | None
    out: Path


def run_training(m: RunManifest) -> RunResult:
    m.validate()
    data = prepare_data(m)
    ds = data.dataset
    cfg = m.model_config(ds.hsi.shape[-1], ds.lidar.shape[-1], data.n_classes)
    model = FusionModel(cfg)
    train_set = ds.train
    test_set = _test_split(m, ds)
    out = Path(m.out)
    out.mkdir(parents=True, exist_ok=True)
    m.save(out / "manifest.txt")
    write_train_index(ds, out / "train_index.txt")
    history = train(model, train_set, m.train_config(), test_set=test_set)
    history.write(out / "history.csv")
    save_checkpoint(model, out / "checkpoint.ckpt")
    train_metrics = evaluate(model, train_set)
    test_metrics = evaluate(model, test_set) if test_set is not None else None
    report = train_metrics.table("Training split")
    if test_metrics is not None:
        report += "\n" + test_metrics.table("Test split")
    (out / "metrics.txt").write_text(report)
    return RunResult(model, train_metrics, test_metrics, out)


# ---------------------------------------------------------------------------
# argument handling

_FLAG_FIELDS = {
    "hsi": "hsi", "lidar": "lidar", "labels": "labels", "train_idx": "train_idx", "per_class": "per_class",
    "test_limit": "test_limit", "out": "out", "seed": "seed", "stacks": "stacks", "embed": "embed",
    "patch": "patch", "dropout": "dropout", "activation": "activation", "lr": "lr", "epochs": "epochs",
    "batch": "batch", "eval_every": "eval_every", "norm_stats": "norm_stats", "lidar_bands": "lidar_bands",
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", help="key=value manifest; explicit flags override it")
    p.add_argument("--hsi")
    p.add_argument("--lidar")
    p.add_argument("--labels")
    split = p.add_mutually_exclusive_group()
    split.add_argument("--train-idx", dest="train_idx", help="file of 'row col' training coordinates")
    split.add_argument("--per-class", dest="per_class", type=int, metavar="K")
    p.add_argument("--test-limit", dest="test_limit", type=int, help="score at most this many test patches")
    p.add_argument("--stacks", type=int)
    p.add_argument("--embed", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--activation", choices=["relu", "tanh", "linear"])
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--norm-stats", dest="norm_stats", choices=["scene", "train"])
    p.add_argument("--lidar-bands", dest="lidar_bands", choices=["all", "elevation"])
    p.add_argument("--single-modality", dest="single_modality", action="store_true", default=None,
                   help="feed the HSI patch to both streams (not the published setup)")


def manifest_from_args(args) -> RunManifest:
    base = RunManifest.load(args.manifest) if args.manifest else RunManifest()
    changes = {f: getattr(args, a) for a, f in _FLAG_FIELDS.items() if getattr(args, a, None) is not None}
    if args.single_modality:
        changes["single_modality"] = True
    if "train_idx" in changes:
        changes["per_class"] = None
    if "per_class" in changes:
        changes["train_idx"] = None
    return dataclasses.replace(base, **changes)


def cmd_train(args) -> int:
    m = manifest_from_args(args)
    result = run_training(m)
    sys.stdout.write(result.train_metrics.table("Training split"))
    if result.test_metrics is not None:
        sys.stdout.write("\n" + result.test_metrics.table("Test split"))
    log.info("wrote %s", result.out)
    return EXIT_OK


def _check_channels(model: FusionModel, ds: PatchDataset) -> None:
    cfg = model.config
    h, l = ds.hsi.shape[-1], ds.lidar.shape[-1]
    if (cfg.hsi_channels, cfg.lidar_channels) != (h, l):
        raise DataError(
            f"checkpoint expects {cfg.hsi_channels} HSI / {cfg.lidar_channels} LiDAR channels, "
            f"data has {h} HSI / {l} LiDAR"
        )
    if ds.patch_size != cfg.patch_size:
        raise DataError(f"checkpoint patch size {cfg.patch_size}, data patches {ds.patch_size}")


def _load_model(path) -> FusionModel:
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise DataError(str(exc)) from exc


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    m = manifest_from_args(args)
    m.validate()
    data = prepare_data(m)
    _check_channels(model, data.dataset)
    ds = data.dataset
    split = {"train": ds.train, "test": _test_split(m, ds), "all": ds}[args.split]
    if split is None or len(split) == 0:
        raise DataError(f"the {args.split} split is empty")
    metrics = evaluate(model, split)
    sys.stdout.write(metrics.table(f"{args.split} split"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    overrides = {}
    for flag, field in (("stacks", "n_stacks"), ("embed", "embed_dim"), ("patch", "patch_size"),
                        ("hsi_channels", "hsi_channels"), ("lidar_channels", "lidar_channels"),
                        ("classes", "n_classes"), ("seed", "seed")):
        v = getattr(args, flag)
        if v is not None:
            overrides[field] = v
    cfg = TINY_CONFIG.replace(**overrides)
    report = check_model_gradients(cfg, batch=args.batch, seed=cfg.seed, threshold=args.threshold)
    sys.stdout.write(report.format())
    return EXIT_OK if report.passed else EXIT_GRADCHECK


AXES = {"stacks": ("Stack (N_x)", "stacks"), "embed": ("Embed Size", "embed")}


def format_ablation(axis: str, results: dict[int, float | None]) -> str:
    label = AXES[axis][0]
    head = [f"{label:<12}"] + [f"{v:>6}" for v in results]
    row = [f"{'OA (%)':<12}"] + [f"{'--':>6}" if oa is None else f"{100 * oa:>6.2f}" for oa in results.values()]
    return " | ".join(head) + "\n" + " | ".join(row) + "\n"


def _ablation_run(m: RunManifest) -> float:
    result = run_training(m)
    metrics = result.test_metrics or result.train_metrics
    return metrics.overall_accuracy


def parse_values(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"--values must be integers, got {text!r}") from None
    if not values:
        raise UsageError("--values is empty")
    if len(set(values)) != len(values):
        raise UsageError(f"--values contains duplicates: {values}")
    return values


def cmd_ablate(args) -> int:
    values = parse_values(args.values)
    base = manifest_from_args(args)
    field = AXES[args.axis][1]
    out = Path(base.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = {v: dataclasses.replace(base, **{field: v, "out": str(out / f"{args.axis}_{v}")}) for v in values}
    for run in runs.values():
        run.validate()
        run.model_config(1, 1, 2)
    results: dict[int, float | None] = {v: None for v in values}
    table = out / "ablation.txt"

    def flush():
        table.write_text(format_ablation(args.axis, results))

    if args.workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(args.workers) as pool:
            futures = {v: pool.submit(_ablation_run, runs[v]) for v in values}
            for v in values:
                results[v] = futures[v].result()
                flush()
    else:
        for v in values:
            results[v] = _ablation_run(runs[v])
            flush()
    sys.stdout.write(format_ablation(args.axis, results))
    return EXIT_OK


# fixed class palette; classes beyond its length wrap around
PALETTE = [
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189), (140, 86, 75),
    (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207), (174, 199, 232), (255, 187, 120),
    (152, 223, 138), (255, 152, 150), (197, 176, 213), (196, 156, 148), (247, 182, 210), (219, 219, 141),
    (158, 218, 229), (255, 255, 255),
]


def class_color(c: int) -> tuple[int, int, int]:
    """RGB for 0-indexed class ``c``."""
    return PALETTE[c % len(PALETTE)]


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8).reshape(h, w, 3)


def classification_map(model: FusionModel, cube: SceneCube, dense: bool = False,
                       single_modality: bool = False) -> np.ndarray:
    """(H, W) array of 1-indexed predicted classes; 0 where nothing was predicted."""
    target = np.ones_like(cube.labels) if dense else cube.labels
    ds = extract_patches(dataclasses.replace(cube, labels=target), model.config.patch_size)
    if single_modality:
        ds = ds.with_hsi_as_lidar()
    _check_channels(model, ds)
    out = np.zeros(cube.shape, dtype=np.int32)
    if len(ds):
        out[ds.rows, ds.cols] = model.predict(ds.hsi, ds.lidar) + 1
    return out


def cmd_map(args) -> int:
    model = _load_model(args.checkpoint)
    m = manifest_from_args(args)
    m.validate()
    data = prepare_data(m)
    pred = classification_map(model, data.cube, dense=args.dense, single_modality=m.single_modality)
    rgb = np.zeros(pred.shape + (3,), dtype=np.uint8)
    for c in range(model.config.n_classes):
        rgb[pred == c + 1] = class_color(c)
    out = Path(args.map_out)
    write_ppm(out, rgb)
    legend = ["0 unlabeled 0 0 0"] + [
        f"{c + 1} class_{c + 1} {' '.join(map(str, class_color(c)))}" for c in range(model.config.n_classes)
    ]
    out.with_suffix(".legend.txt").write_text("\n".join(legend) + "\n")
    if args.pred_out:
        np.savetxt(args.pred_out, pred, fmt="%d")
    return EXIT_OK


def cmd_convert(args) -> int:
    try:
        cube = text_bands_to_cube(args.bands, args.out, labels=args.labels)
    except (OSError, CubeError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    print(f"{args.out}: {cube.shape[0]}x{cube.shape[1]}x{cube.shape[2]} {'int32' if args.labels else 'float64'}")
    return EXIT_OK


def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    cube = synth_scene(args.classes, args.height, args.width, args.hsi_channels, args.lidar_channels, args.noise,
                       rng, block=args.block)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cube.save(out / "hsi.cube", out / "lidar.cube", out / "labels.cube")
    print(f"wrote {out}/{{hsi,lidar,labels}}.cube; nearest-mean oracle {cube.meta['oracle_accuracy']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossfuse", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a manifest and/or flags")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print per-class and overall accuracy for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    _add_run_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    p.add_argument("--stacks", type=int)
    p.add_argument("--embed", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--hsi-channels", dest="hsi_channels", type=int)
    p.add_argument("--lidar-channels", dest="lidar_channels", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="retrain once per value of one architecture axis")
    p.add_argument("--axis", choices=sorted(AXES), required=True)
    p.add_argument("--values", required=True, help="comma-separated, e.g. 1,2,3,4")
    p.add_argument("--workers", type=int, default=1)
    _add_run_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("map", help="write a classification map as a PPM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--map-out", dest="map_out", required=True, help="output .ppm path")
    p.add_argument("--pred-out", dest="pred_out", help="optional text matrix of predicted classes")
    p.add_argument("--dense", action="store_true", help="predict every pixel, not only labeled ones")
    _add_run_flags(p)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("convert", help="stack text band matrices into a cube file")
    p.add_argument("bands", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--labels", action="store_true", help="write an int32 label cube")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("synth", help="generate a synthetic HSI/LiDAR scene")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--hsi-channels", dest="hsi_channels", type=int, default=16)
    p.add_argument("--lidar-channels", dest="lidar_channels", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--block", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, kvtext.FieldError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
