"""Command-line entry point: ``stmbr <subcommand> [options]``.

Effective settings merge in the order defaults <- ``--config`` file <- flags.
The config file holds ``key = value`` lines; ``#`` starts a comment.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics, workflow
from .data.checkpoint import CheckpointError
from .data.dataset import load_dataset, save_dataset
from .data.images import write_mask_pgm, write_overlay_ppm
from .data.nifti import read_nifti
from .data.phantoms import PhantomSpec, Sample, SampleSet, gen_phantoms
from .models import ModelConfig, SACBBRSeg, STMBRNet
from .runtime import set_threads
from .train import Hyperparams, TrainingError, evaluate, load_checkpoint, save_checkpoint, split_dataset

log = logging.getLogger("stmbr")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

# key -> (default, parser); every key is settable from the config file and by --flag
_MODEL_KEYS = ("stem_width", "stm_widths", "seg_widths", "hidden", "dropout", "head_kernel", "channel_boost",
               "attention")
_HYPER_KEYS = ("lr", "epochs", "batch_size", "momentum", "optimizer")


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _widths(text) -> tuple[int, int]:
    if isinstance(text, tuple):
        return text
    parts = tuple(int(p) for p in str(text).replace(" ", "").split(","))
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated widths, got {text!r}")
    return parts


def _defaults() -> dict[str, tuple[object, callable]]:
    h, m = Hyperparams(), ModelConfig()
    table: dict[str, tuple[object, callable]] = {
        "seed": (0, int),
        "precision": ("float32", str),
        "threads": (None, int),  # None: STMB_THREADS decides
        "aux_lr": (workflow.AUX_HYPER.lr, float),
        "aux_epochs": (workflow.AUX_HYPER.epochs, int),
        "test_ratio": (0.2, float),
        "val_ratio": (0.1, float),
        "count": (200, int),
        "size": (64, int),
        "infected_fraction": (0.5, float),
        "threshold": (0.5, float),
        "theta": (2.0, float),
        "full_scale": (False, _bool),  # STM widths 256/512 instead of the desk-scale defaults
    }
    for k in _HYPER_KEYS:
        v = getattr(h, k)
        table[k] = (v, type(v))
    for k in _MODEL_KEYS:
        v = getattr(m, k)
        table[k] = (v, _bool if isinstance(v, bool) else _widths if isinstance(v, tuple) else type(v))
    return table


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def resolve_config(file_values: dict[str, str], flag_values: dict[str, object]) -> dict[str, object]:
    table = _defaults()
    cfg = {k: v for k, (v, _) in table.items()}
    for source in (file_values, flag_values):
        for k, v in source.items():
            if k not in table:
                raise ValueError(f"unknown config key {k!r}")
            cfg[k] = table[k][1](v)
    if cfg["precision"] not in ("float32", "float64"):
        raise ValueError("precision must be float32 or float64")
    return cfg


def hyper_from(cfg: dict) -> Hyperparams:
    return Hyperparams(**{k: cfg[k] for k in _HYPER_KEYS})


def model_config_from(cfg: dict) -> ModelConfig:
    kw = {k: cfg[k] for k in _MODEL_KEYS}
    if cfg["full_scale"]:
        return ModelConfig.full_scale(dtype=cfg["precision"], input_size=cfg["size"],
                                       **{k: v for k, v in kw.items() if k != "stm_widths"})
    return ModelConfig(dtype=cfg["precision"], input_size=cfg["size"], **kw)


# --------------------------------------------------------------------------
# argument parsing


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _settings_group(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("settings (override the config file)")
    for key, (default, conv) in _defaults().items():
        flag = "--" + key.replace("_", "-")
        if conv is _bool:
            g.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS)
        else:
            g.add_argument(flag, dest=key, default=argparse.SUPPRESS, metavar=key.upper(),
                           help=f"default {default}")
    p.add_argument("--config", type=Path, help="key = value settings file")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stmbr", description="Two-stage lung CT infection detection and segmentation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic phantom dataset")
    p.add_argument("--out", type=Path, required=True)

    for name, what in (("train-detect", "detector"), ("train-seg", "segmenter")):
        p = sub.add_parser(name, help=f"train the {what}")
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True, help="output directory")
        if name == "train-seg":
            p.add_argument("--aux-from", type=Path, help="reuse the auxiliary net stored in a detector checkpoint")

    p = sub.add_parser("eval-detect", help="detection report, ROC/PR curves and PCA projection")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", choices=("test", "all"), default="test")

    p = sub.add_parser("eval-seg", help="segmentation report")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", choices=("test", "all"), default="test")

    p = sub.add_parser("segment", help="write mask PGMs and overlay PPMs")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="dataset directory or .nii volume")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("pipeline", help="detect, then segment only slices flagged infected")
    p.add_argument("--detector", type=Path, required=True)
    p.add_argument("--segmenter", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="dataset directory or .nii volume")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ablation", help="compare full / no-CB / no-SA segmenters")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and block")
    p.add_argument("--seeds", type=int, default=5)

    for sp in sub.choices.values():
        _settings_group(sp)
    return parser


# --------------------------------------------------------------------------
# helpers


def _load_input(path: Path) -> SampleSet:
    if path.is_file() and (path.suffix == ".nii" or path.name.endswith(".nii.gz")):
        _, vol = read_nifti(path)
        stem = path.name.split(".")[0]
        return SampleSet(
            Sample(id=f"{stem}_s{k:03d}", image=vol[k, 0], label=0, mask=np.zeros(vol.shape[2:], np.uint8))
            for k in range(vol.shape[0])
        )
    return load_dataset(path)


def _split(samples: SampleSet, cfg: dict):
    return split_dataset(samples, cfg["test_ratio"], cfg["val_ratio"], cfg["seed"])


def _load(path: Path, kind):
    model, _ = load_checkpoint(path)
    if not isinstance(model, kind):
        raise CheckpointError(f"{path} holds a {model.kind} model, expected {kind.kind}")
    return model


def _eval_subset(model, samples: SampleSet, split: str) -> SampleSet:
    if split == "all":
        return samples
    ids = model.meta.get("extra", {}).get("test_ids")
    if ids is None:
        raise ValueError("checkpoint records no test split; pass --split all")
    wanted = set(ids)
    picked = SampleSet(s for s in samples if s.id in wanted)
    if len(picked) != len(wanted):
        raise ValueError("dataset does not contain the checkpoint's test split")
    return picked


def _save_model(model, out: Path, name: str, test_ids, cfg: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.sbrs"
    save_checkpoint(model, model.train_state, path, {"test_ids": [s.id for s in test_ids], "run": cfg})
    model.train_state.history.to_csv(out / f"{name}_history.csv")
    log.info("wrote %s", path)
    return path


def _write_masks(out: Path, samples: SampleSet, masks: dict) -> int:
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "overlays").mkdir(parents=True, exist_ok=True)
    for s in samples:
        if s.id in masks:
            write_mask_pgm(masks[s.id], out / "masks" / f"{s.id}.pgm")
            write_overlay_ppm(s.image, masks[s.id], out / "overlays" / f"{s.id}.ppm")
    return len(masks)


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg):
    samples = gen_phantoms(PhantomSpec(seed=cfg["seed"], count=cfg["count"], size=cfg["size"],
                                       infected_fraction=cfg["infected_fraction"]))
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples ({len(samples.infected())} infected) to {args.out}")


def cmd_train_detect(args, cfg):
    train_set, val_set, test_set = _split(load_dataset(args.data), cfg)
    aux_hyper = Hyperparams(lr=cfg["aux_lr"], epochs=cfg["aux_epochs"])
    model = workflow.fit_detector(train_set, val_set, model_config_from(cfg), hyper_from(cfg), cfg["seed"],
                                  aux_hyper=aux_hyper)
    _save_model(model, args.out, "detector", test_set, cfg)
    _, acc, _ = evaluate(model, test_set, "detect")
    print(f"test_accuracy={100 * acc:.2f}")


def cmd_train_seg(args, cfg):
    samples = load_dataset(args.data)
    train_set, val_set, test_set = _split(samples, cfg)
    aux = None
    mcfg = model_config_from(cfg)
    if mcfg.channel_boost and args.aux_from is not None:
        aux = _load(args.aux_from, STMBRNet).aux
        if aux is None:
            raise ValueError(f"{args.aux_from} has no auxiliary network")
    aux_hyper = Hyperparams(lr=cfg["aux_lr"], epochs=cfg["aux_epochs"])
    model = workflow.fit_segmenter(train_set.infected(), val_set.infected(), mcfg, hyper_from(cfg), cfg["seed"],
                                   aux=aux, aux_source=train_set, aux_hyper=aux_hyper)
    _save_model(model, args.out, "segmenter", test_set.infected(), cfg)
    rep = metrics.segmentation_metrics(workflow.segment(model, test_set.infected()), test_set.infected().masks())
    print(f"test_dice={100 * rep.dice[1]:.2f} test_iou={100 * rep.iou[1]:.2f}")


def cmd_eval_detect(args, cfg):
    model = _load(args.model, STMBRNet)
    samples = _eval_subset(model, load_dataset(args.data), args.split)
    p = workflow.detect(model, samples)
    labels = samples.labels()
    counts = metrics.confusion((p >= cfg["threshold"]).astype(int), labels)
    report = metrics.detection_metrics(counts)
    args.out.mkdir(parents=True, exist_ok=True)
    if len(set(labels.tolist())) == 2:
        roc, report.roc_auc = metrics.curve_auc(p, labels, "roc")
        pr, report.pr_auc = metrics.curve_auc(p, labels, "pr")
        metrics.write_curve_csv(roc, args.out / "roc.csv", "fpr,tpr")
        metrics.write_curve_csv(pr, args.out / "pr.csv", "recall,precision")
    else:
        log.warning("one class only: ROC/PR curves skipped")
    feats = workflow.embed(model, samples)
    k = min(3, *feats.shape)
    if len(samples) >= 2:
        proj, ratio = metrics.pca_project(feats, k)
        with open(args.out / "pca.csv", "w", encoding="utf-8") as fh:
            fh.write("id,label," + ",".join(f"pc{i + 1}" for i in range(k)) + "\n")
            for s, row in zip(samples, proj):
                fh.write(f"{s.id},{s.label}," + ",".join(repr(float(v)) for v in row) + "\n")
        log.info("PCA explained variance: %s", ", ".join(f"{100 * r:.2f}%" for r in ratio))
    metrics.write_detection_report(report, counts, args.out / "detection.csv", args.out / "detection.txt")
    sys.stdout.write(metrics.detection_kv(report, counts))


def cmd_eval_seg(args, cfg):
    model = _load(args.model, SACBBRSeg)
    samples = _eval_subset(model, load_dataset(args.data), args.split)
    if args.split == "all":
        samples = samples.infected()
    rep = metrics.segmentation_metrics(workflow.segment(model, samples), samples.masks(), theta=cfg["theta"])
    args.out.mkdir(parents=True, exist_ok=True)
    metrics.write_seg_report(rep, args.out / "segmentation.csv", args.out / "segmentation.txt")
    sys.stdout.write(metrics.seg_kv(rep))


def cmd_segment(args, cfg):
    model = _load(args.model, SACBBRSeg)
    samples = _load_input(args.data)
    masks = workflow.segment(model, samples)
    n = _write_masks(args.out, samples, {s.id: m for s, m in zip(samples, masks)})
    print(f"segmented={n}")


def cmd_pipeline(args, cfg):
    det = _load(args.detector, STMBRNet)
    seg = _load(args.segmenter, SACBBRSeg)
    samples = _load_input(args.data)
    res = workflow.run_pipeline(det, seg, samples, cfg["threshold"])
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "pipeline.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "p_infected", "detected", "segmented", "lesion_pixels"])
        for sid, p, d in zip(res.ids, res.p_infected, res.detected):
            m = res.masks.get(sid)
            wr.writerow([sid, f"{100 * p:.2f}", int(d), int(m is not None), "" if m is None else int(m.sum())])
    n = _write_masks(args.out, samples, res.masks) if res.masks else 0
    print(f"slices={len(samples)} detected={int(res.detected.sum())} segmented={n}")


def cmd_ablation(args, cfg):
    train_set, _, test_set = _split(load_dataset(args.data), cfg)
    rows = workflow.ablation(train_set.infected(), test_set.infected(), model_config_from(cfg), hyper_from(cfg),
                             cfg["seed"], aux_source=train_set)
    table = workflow.format_ablation(rows)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "ablation.csv").write_text(table, encoding="utf-8")
    sys.stdout.write(table)


def cmd_gradcheck(args, cfg):
    from .gradcheck import run_suite

    worst = run_suite(seeds=tuple(range(cfg["seed"], cfg["seed"] + args.seeds)))
    for name, err in worst.items():
        print(f"{name:24s} {err:.3e}")
    top = max(worst.values())
    print(f"max_relative_error={top:.3e}")
    if top >= 1e-4:
        raise TrainingError(f"gradient check failed: {top:.3e} >= 1e-4")


COMMANDS = {
    "synth": cmd_synth,
    "train-detect": cmd_train_detect,
    "train-seg": cmd_train_seg,
    "eval-detect": cmd_eval_detect,
    "eval-seg": cmd_eval_seg,
    "segment": cmd_segment,
    "pipeline": cmd_pipeline,
    "ablation": cmd_ablation,
    "gradcheck": cmd_gradcheck,
}

_NON_SETTINGS = {"command", "config", "verbose", "out", "data", "model", "split", "detector", "segmenter",
                 "aux_from", "seeds"}


def dispatch(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = read_config_file(args.config) if args.config else {}
        flags = {k: v for k, v in vars(args).items() if k not in _NON_SETTINGS}
        cfg = resolve_config(file_values, flags)
        for k in sorted(cfg):
            log.info("config %s = %s", k, cfg[k])
        set_threads(cfg["threads"])
        COMMANDS[args.command](args, cfg)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except (TrainingError, OSError, RuntimeError, ArithmeticError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())
