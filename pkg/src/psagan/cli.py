"""``psagan`` command-line interface.

Exit codes: 0 success, 1 usage/config error, 2 data or format error,
3 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .detect import (CircleAnnotation, DetectorTrainConfig, detect, load_annotations, match_detections,
                     save_annotations, train_detector)
from .io import (FormatError, file_digest, load_checkpoint, read_image, save_checkpoint, write_image,
                 write_metric_csv, write_xy_csv)
from .losses import GanLossConfig
from .metrics import DegenerateManifoldError, ManifoldConfig, density_coverage, embed, psnr, ssim
from .networks import FeatureNet, NetworkSpec, build_network
from .pipeline import (SuperResolverConfig, TranslatorConfig, extract_patches, make_sr_pairs, super_resolve,
                       train_super_resolver, train_translator, translate)
from .psa_stats import distribution_stats, kde_isj
from .registration import DegenerateLandmarksError, estimate_affine, load_landmarks, warp_image
from .synth import STYLE_SPECS, SceneDensityError, generate_dataset, read_manifest

logger = logging.getLogger("psagan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SPEC_PREFIX = "__spec__:"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- checkpoints carrying their architecture ----------------------------------------------
def save_network(path, net) -> None:
    state = {SPEC_PREFIX + json.dumps(asdict(net.spec), sort_keys=True): np.zeros(0, np.float32)}
    state.update(net.state_dict())
    save_checkpoint(path, state)


def load_network(path):
    state = load_checkpoint(path)
    specs = [k for k in state if k.startswith(SPEC_PREFIX)]
    if len(specs) != 1:
        raise FormatError(f"{path}: checkpoint carries no network description")
    fields = json.loads(specs[0][len(SPEC_PREFIX):])
    fields["widths"] = tuple(fields["widths"])
    net = build_network(NetworkSpec(**fields))
    del state[specs[0]]
    try:
        net.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    net.eval()
    return net


def network_specs(cfg: RunConfig) -> Dict[str, NetworkSpec]:
    sn = dict(lipschitz_k=cfg.lipschitz_k, n_power_iterations=cfg.n_power_iterations)
    return {
        "translator_generator": NetworkSpec("translator_generator", cfg.translator_widths,
                                            attention_stages=cfg.attention_stages, **sn),
        "patchgan_discriminator": NetworkSpec("patchgan_discriminator", cfg.patchgan_widths, in_channels=2,
                                              **sn),
        "sr_generator": NetworkSpec("sr_generator", cfg.sr_widths, n_rrdb=cfg.n_rrdb, growth=cfg.rrdb_growth,
                                    **sn),
        "sr_discriminator": NetworkSpec("sr_discriminator", cfg.sr_disc_widths, **sn),
        "srpsa_net": NetworkSpec("srpsa_net", cfg.srpsa_widths, spectral_norm=False),
    }


# -- run bookkeeping ------------------------------------------------------------------------
class RunLog:
    """Resolved config, seed and input digest written next to a command's outputs."""

    def __init__(self, path: Path, command: str, cfg: Optional[RunConfig], inputs: Sequence[Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        files = sorted({p for p in inputs if Path(p).is_file()})
        lines = [f"# psagan {__version__} {command}", f"started = {time.strftime('%Y-%m-%dT%H:%M:%S')}"]
        if cfg is not None:
            lines.append(f"seed = {cfg.seed}")
            lines += ["[config]"] + cfg.lines()
        lines += ["[inputs]", f"input_files = {len(files)}", f"input_sha256 = {file_digest(files)}"]
        self.path.write_text("\n".join(lines) + "\n")

    def add(self, line: str) -> None:
        with open(self.path, "a") as fh:
            fh.write(line + "\n")


def _log_path(out: Path) -> Path:
    out = Path(out)
    return out / "run.log" if out.suffix == "" else out.with_name(out.name + ".log")


def _loss_csv(path: Path, history, header=("step", "loss_g", "loss_d")) -> None:
    cols = list(zip(*history)) if history else [[] for _ in header]
    write_xy_csv(path, header, cols)


# -- dataset access -----------------------------------------------------------------------
def _entries(data: Path, kind: str, split: Optional[str] = None) -> List[Path]:
    manifest = Path(data) / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest} not found")
    return [Path(data) / r["path"] for r in read_manifest(manifest)
            if r["kind"] == kind and (split is None or r["split"] == split)]


def _pairs(data: Path, split: str) -> List[Tuple[np.ndarray, np.ndarray]]:
    oms = _entries(data, "om", split)
    out = []
    for om_path in oms:
        om, sem = read_image(om_path), read_image(Path(data) / "sem" / om_path.name)
        if om.shape != sem.shape:
            raise FormatError(f"{om_path.name}: om and sem extents differ")
        out.append((om, sem))
    if not out:
        raise FormatError(f"no {split} image pairs in {data}")
    return out


def _patch_pairs(pairs, patch: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    out = []
    for om, sem in pairs:
        for (po, _), (ps, _) in zip(extract_patches(om, patch), extract_patches(sem, patch)):
            out.append((po, ps))
    return out


def _detector_samples(data: Path, split: str):
    out = []
    for sem_path in _entries(data, "sem", split):
        out.append((read_image(sem_path), load_annotations(Path(data) / "annotations" / (sem_path.stem + ".csv"))))
    return out


def _gan_loss(cfg: RunConfig) -> GanLossConfig:
    return GanLossConfig(cfg.lambda_rmse, cfg.lambda_rel, cfg.eta_l1, cfg.label_smooth)


def _switch(v: int) -> Optional[int]:
    return None if v < 0 else v


# -- commands -----------------------------------------------------------------------------
def cmd_synth(args, cfg: RunConfig) -> None:
    # synth_count sets the primary style's count; the others keep their ratio to it
    ratio = cfg.synth_count / STYLE_SPECS["primary"].count
    styles = {name: (replace(spec, shape=tuple(cfg.synth_shape), count=max(1, round(spec.count * ratio))),
                     cfg.synth_images) for name, spec in STYLE_SPECS.items()}
    RunLog(_log_path(Path(args.out)), "synth", cfg, [])
    generate_dataset(args.out, styles, seed=cfg.seed, train_fraction=cfg.synth_train_fraction)


def cmd_register(args, cfg: RunConfig) -> None:
    RunLog(_log_path(Path(args.out)), "register", None, [Path(args.landmarks), Path(args.in_)])
    transform = estimate_affine(load_landmarks(args.landmarks))
    image = read_image(args.in_)
    shape = read_image(args.reference).shape if args.reference else image.shape
    write_image(args.out, warp_image(image, transform, shape))


def train_translator_from(data: Path, cfg: RunConfig):
    specs = network_specs(cfg)
    gen = build_network(specs["translator_generator"], seed=cfg.seed)
    disc = build_network(specs["patchgan_discriminator"], seed=cfg.seed + 1)
    tcfg = TranslatorConfig(epochs=cfg.translator_epochs, batch=cfg.translator_batch, lr_g=cfg.translator_lr_g,
                            lr_d=cfg.translator_lr_d, betas=(cfg.translator_beta1, cfg.translator_beta2),
                            switch_epoch=_switch(cfg.translator_switch_epoch), decay_factor=cfg.decay_factor,
                            decay_every=cfg.decay_every, augment=cfg.augment, seed=cfg.seed, loss=_gan_loss(cfg))
    result = train_translator(_patch_pairs(_pairs(data, "train"), cfg.patch_size), gen, disc, tcfg)
    return gen, result


def train_sr_from(data: Path, cfg: RunConfig, translator=None):
    specs = network_specs(cfg)
    gen = build_network(specs["sr_generator"], seed=cfg.seed + 2)
    disc = build_network(specs["sr_discriminator"], seed=cfg.seed + 3)
    patches = _patch_pairs(_pairs(data, "train"), cfg.patch_size)
    if cfg.sr_source == "translated":
        if translator is None:
            raise ConfigError("sr_source = translated needs a translator checkpoint (--translator)")
        targets = [translate(om, translator, cfg.patch_size) for om, _ in patches]
        lows = [p[0] for p in make_sr_pairs(targets)]
        pairs = [(low, sem) for low, (_, sem) in zip(lows, patches)]
    else:
        pairs = make_sr_pairs([sem for _, sem in patches])
    scfg = SuperResolverConfig(epochs=cfg.sr_epochs, batch=cfg.sr_batch, lr_g=cfg.sr_lr_g, lr_d=cfg.sr_lr_d,
                               betas=(cfg.sr_beta1, cfg.sr_beta2), switch_epoch=_switch(cfg.sr_switch_epoch),
                               decay_factor=cfg.decay_factor, decay_every=cfg.decay_every, augment=cfg.augment,
                               seed=cfg.seed, featnet_seed=cfg.featnet_seed, loss=_gan_loss(cfg))
    result = train_super_resolver(pairs, gen, disc, scfg, FeatureNet(seed=cfg.featnet_seed))
    return gen, result


def train_detector_from(data: Path, cfg: RunConfig):
    net = build_network(network_specs(cfg)["srpsa_net"], seed=cfg.seed + 4)
    dcfg = DetectorTrainConfig(epochs=cfg.det_epochs, batch=cfg.det_batch, lr=cfg.det_lr,
                               weight_decay=cfg.det_weight_decay, lambda_p=cfg.lambda_p, max_radius=cfg.max_radius,
                               min_radius_cells=cfg.det_min_radius_cells, scale_factors=tuple(cfg.scale_factors),
                               seed=cfg.seed, literal_p_mask=cfg.literal_p_mask, augment=cfg.augment)
    train = _detector_samples(data, "train")
    if not train:
        raise FormatError(f"no training images in {data}")
    result = train_detector(train, net, dcfg, val_samples=_detector_samples(data, "val") or None)
    return net, result


def _train_command(args, cfg: RunConfig, kind: str) -> None:
    data, out = Path(args.data), Path(args.out)
    log = RunLog(_log_path(out), f"train-{kind}", cfg, _entries(data, "om") + _entries(data, "sem")
                 + _entries(data, "annotations"))
    if kind == "translator":
        net, result = train_translator_from(data, cfg)
        _loss_csv(out.with_suffix(".loss.csv"), result.history)
    elif kind == "sr":
        translator = load_network(args.translator) if getattr(args, "translator", None) else None
        net, result = train_sr_from(data, cfg, translator)
        _loss_csv(out.with_suffix(".loss.csv"), result.history)
    else:
        net, result = train_detector_from(data, cfg)
        _loss_csv(out.with_suffix(".loss.csv"), result.history, ("step", "loss_train", "loss_val"))
    save_network(out, net)
    log.add(f"checkpoint_sha256 = {file_digest([out])}")


def cmd_super_resolve(args, cfg: RunConfig) -> None:
    RunLog(_log_path(Path(args.out)), "super-resolve", cfg, [Path(args.translator), Path(args.sr), Path(args.in_)])
    translator, sr = load_network(args.translator), load_network(args.sr)
    write_image(args.out, super_resolve(read_image(args.in_), translator, sr, cfg.patch_size))


def cmd_detect(args, cfg: RunConfig) -> None:
    RunLog(_log_path(Path(args.out)), "detect", cfg, [Path(args.model), Path(args.in_)])
    net = load_network(args.model)
    if net.spec.kind != "srpsa_net":
        raise FormatError(f"{args.model} is not a detector checkpoint")
    thresh = cfg.p_thresh if args.p_thresh is None else args.p_thresh
    dets = detect(read_image(args.in_), net, thresh, tuple(cfg.scale_factors), cfg.max_radius)
    save_annotations(args.out, dets)


def _images_by_name(folder: Path) -> Dict[str, Path]:
    files = [p for p in sorted(Path(folder).iterdir()) if p.suffix.lower() in (".pgm", ".png")]
    return {p.stem: p for p in files}


def evaluate_dirs(real_dir: Path, fake_dir: Path, cfg: RunConfig) -> List[Tuple[str, float]]:
    real, fake = _images_by_name(real_dir), _images_by_name(fake_dir)
    common = sorted(set(real) & set(fake))
    if not common:
        raise FormatError(f"no images with matching names in {real_dir} and {fake_dir}")
    reals = [read_image(real[k]) for k in common]
    fakes = [read_image(fake[k]) for k in common]
    psnrs = [psnr(f, r) for r, f in zip(reals, fakes)]
    finite = [v for v in psnrs if np.isfinite(v)]
    rows = [("psnr", float(np.mean(finite)) if finite else float("inf")),
            ("ssim", float(np.mean([ssim(f, r) for r, f in zip(reals, fakes)])))]
    k = min(cfg.knn_k, len(common) - 1)
    if k >= 1:
        try:
            d, c = density_coverage(embed(reals, cfg.embedder_seed, cfg.embed_dim),
                                    embed(fakes, cfg.embedder_seed, cfg.embed_dim, source="fake"), ManifoldConfig(k))
            rows += [("density", d), ("coverage", c)]
        except DegenerateManifoldError:
            logger.warning("real embeddings are degenerate; density/coverage skipped")
    return rows + [("pairs", float(len(common)))]


def cmd_evaluate(args, cfg: RunConfig) -> None:
    RunLog(_log_path(Path(args.out)), "evaluate", cfg,
           list(_images_by_name(args.real).values()) + list(_images_by_name(args.fake).values()))
    rows = evaluate_dirs(Path(args.real), Path(args.fake), cfg)
    write_metric_csv(args.out, rows)
    print("\n".join(f"{k}: {v:.6g}" for k, v in rows))


def stats_for(circles: Sequence[CircleAnnotation], out: Path, pixel_size: Optional[float] = None):
    """Radii in pixels, or diameters in micrometres when ``pixel_size`` (um/px) is given."""
    radii = np.array([c.r for c in circles], dtype=np.float64)
    sizes, unit = (radii, "px") if pixel_size is None else (2.0 * radii * pixel_size, "um")
    if len(sizes) == 0:
        raise FormatError("no particles to summarise")
    kde = kde_isj(sizes)
    report = distribution_stats(sizes, unit=unit, kde=kde)
    write_metric_csv(out, report.rows())
    write_xy_csv(Path(out).with_name(Path(out).stem + "_kde.csv"), ("x", "density"), (kde.grid, kde.density))
    return report


def cmd_stats(args, cfg: RunConfig) -> None:
    RunLog(_log_path(Path(args.out)), "stats", cfg, [Path(args.annotations)])
    if args.pixel_size is not None and args.pixel_size <= 0:
        raise UsageError("--pixel-size must be positive")
    report = stats_for(load_annotations(args.annotations), Path(args.out), args.pixel_size)
    print(f"unit: {report.unit}")
    print("\n".join(f"{k}: {v:.6g}" for k, v in report.rows()))


def cmd_pipeline(args, cfg: RunConfig) -> None:
    data, out = Path(args.in_), Path(args.out)
    for sub in ("registered", "super_resolved", "sem", "detections"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    log = RunLog(out / "run.log", "pipeline", cfg, _entries(data, "om") + _entries(data, "sem")
                 + _entries(data, "om_raw") + _entries(data, "landmarks") + _entries(data, "annotations"))

    t0 = time.time()
    translator, tres = train_translator_from(data, cfg)
    save_network(out / "translator.mgrn", translator)
    _loss_csv(out / "translator.loss.csv", tres.history)
    log.add(f"translator_seconds = {time.time() - t0:.1f}")

    t0 = time.time()
    sr, sres = train_sr_from(data, cfg, translator)
    save_network(out / "super_resolver.mgrn", sr)
    _loss_csv(out / "super_resolver.loss.csv", sres.history)
    log.add(f"super_resolver_seconds = {time.time() - t0:.1f}")

    t0 = time.time()
    detector, dres = train_detector_from(data, cfg)
    save_network(out / "detector.mgrn", detector)
    _loss_csv(out / "detector.loss.csv", dres.history, ("step", "loss_train", "loss_val"))
    log.add(f"detector_seconds = {time.time() - t0:.1f}")

    truth, found, matched = [], [], 0
    for raw_path in _entries(data, "om_raw", "val"):
        stem = raw_path.stem
        sem = read_image(data / "sem" / f"{stem}.pgm")
        registered = warp_image(read_image(raw_path), estimate_affine(load_landmarks(data / "landmarks" / f"{stem}.csv")),
                                sem.shape)
        write_image(out / "registered" / f"{stem}.pgm", registered)
        restored = super_resolve(registered, translator, sr, cfg.patch_size)
        write_image(out / "super_resolved" / f"{stem}.pgm", restored)
        write_image(out / "sem" / f"{stem}.pgm", sem)
        dets = detect(restored, detector, cfg.p_thresh, tuple(cfg.scale_factors), cfg.max_radius)
        save_annotations(out / "detections" / f"{stem}.csv", dets)
        gt = load_annotations(data / "annotations" / f"{stem}.csv")
        matched += len(match_detections(gt, dets))
        truth += gt
        found += dets
    if not truth:
        raise FormatError(f"no validation scenes in {data}")

    write_metric_csv(out / "metrics.csv", evaluate_dirs(out / "sem", out / "super_resolved", cfg)
                     + [("detections", float(len(found))), ("ground_truth", float(len(truth))),
                        ("matched", float(matched))])
    stats_for(truth, out / "stats_truth.csv")
    if found:
        stats_for(found, out / "stats_detected.csv")
    log.add(f"matched = {matched} / {len(truth)}")


# -- entry point --------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="psagan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, *, config=True, help=""):
        p = sub.add_parser(name, help=help)
        if config:
            p.add_argument("--config", help="key = value run configuration")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override one config key (repeatable)")
            p.add_argument("--seed", type=int, help="shortcut for --set seed=N")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, help="generate a synthetic OM/SEM corpus")
    p.add_argument("--out", required=True)
    p = add("register", cmd_register, config=False, help="warp an image with a landmark affine fit")
    p.add_argument("--landmarks", required=True)
    p.add_argument("--in", dest="in_", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reference", help="image whose extents the output takes (default: input's)")
    for name, kind in (("train-translator", "translator"), ("train-sr", "sr"), ("train-detector", "detector")):
        p = add(name, lambda a, c, k=kind: _train_command(a, c, k), help=f"train the {kind} network")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        if kind == "sr":
            p.add_argument("--translator", help="translator checkpoint (for sr_source = translated)")
    p = add("super-resolve", cmd_super_resolve, help="OM image to super-resolved SEM-style image")
    p.add_argument("--translator", required=True)
    p.add_argument("--sr", required=True)
    p.add_argument("--in", dest="in_", required=True)
    p.add_argument("--out", required=True)
    p = add("detect", cmd_detect, help="detect circular particles")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="in_", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--p-thresh", type=float)
    p = add("evaluate", cmd_evaluate, help="PSNR, SSIM, density and coverage")
    p.add_argument("--real", required=True)
    p.add_argument("--fake", required=True)
    p.add_argument("--out", required=True)
    p = add("stats", cmd_stats, help="particle-size statistics and KDE curve")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pixel-size", type=float, help="micrometres per pixel; report diameters in um")
    p = add("pipeline", cmd_pipeline, help="train and run every stage end to end")
    p.add_argument("--in", dest="in_", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        cfg = None
        if hasattr(args, "config"):
            overrides = list(args.set) + ([f"seed={args.seed}"] if args.seed is not None else [])
            cfg = load_config(args.config, overrides)
            logger.info("config:\n  %s", "\n  ".join(cfg.lines()))
        args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"psagan: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"psagan: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, DegenerateLandmarksError, SceneDensityError, OSError, ValueError) as exc:
        print(f"psagan: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
