"""``ogan`` command line.

Exit codes: 0 success, 1 unexpected failure, 2 configuration or missing
input, 3 output already exists (pass ``--force``), 4 numerical abort.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, load_config
from .labelnet import load_label_predictor, predict_label, save_label_predictor, train_label_predictor
from .metrics import MetricError, evaluate, load_extractor, train_extractor
from .ontology import OntologyError, load_ontology, parent_of
from .plots import PlotError, plot_logs
from .synthdata import DatasetError, DatasetSpec, ManifestDataset, generate_dataset
from .textemb import WordVectorError, embed_text_average
from .trainer import LOG_NAME, NumericalAbort, TrainError, load_gan, train, train_baseline

log = logging.getLogger("ogan")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_EXISTS, EXIT_NUMERIC = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers

def _git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_run_json(out_dir: Path, args, cfg: ExperimentConfig, started: str, **extra):
    out_dir.mkdir(parents=True, exist_ok=True)
    rec = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config_hash": cfg.config_hash() if cfg else None,
        "config": cfg.to_dict() if cfg else None,
        "seed": cfg.seed if cfg else getattr(args, "seed", None),
        "git_revision": _git_revision(),
        "package_version": __version__,
        "started": started,
        "finished": _now(),
        **extra,
    }
    (out_dir / "run.json").write_text(json.dumps(rec, indent=2) + "\n", encoding="utf-8")


def _load_cfg(args) -> ExperimentConfig:
    if not args.config:
        raise CliError("--config is required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _require(path: Path, what: str, hint: str = "") -> Path:
    if not path.exists():
        raise CliError(f"{what} not found: {path}" + (f" ({hint})" if hint else ""))
    return path


def _manifest(cfg: ExperimentConfig) -> Path:
    return _require(cfg.resolve(cfg.paths.dataset) / "manifest.jsonl", "dataset manifest",
                    "run `ogan gen-data` first")


def _out_file(args, default: Path, name: str) -> Path:
    return Path(args.out) / name if args.out else default


def _check_overwrite(path: Path, force: bool):
    if path.exists() and not force:
        raise CliError(f"{path} already exists; pass --force to overwrite", EXIT_EXISTS)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    started = _now()
    cfg = _load_cfg(args)
    ont_path = _require(cfg.resolve(cfg.paths.ontology), "ontology file")
    ontology = load_ontology(ont_path)
    out = Path(args.out) if args.out else cfg.resolve(cfg.paths.dataset)
    _check_overwrite(out / "manifest.jsonl", args.force)
    spec = DatasetSpec(ontology, cfg.data.num_examples, cfg.data.resolution, cfg.seed)
    counts = generate_dataset(spec, out)
    print(f"wrote {spec.num_examples} examples at {spec.resolution}x{spec.resolution} to {out}")
    for name, n in counts.items():
        print(f"  {name:<16} {n}")
    _write_run_json(out, args, cfg, started, counts=counts)
    return EXIT_OK


def cmd_train_extractor(args) -> int:
    started = _now()
    cfg = _load_cfg(args)
    ds = ManifestDataset(_manifest(cfg))
    out = _out_file(args, cfg.resolve(cfg.paths.extractor), "extractor.pt")
    _check_overwrite(out, args.force)
    e = cfg.extractor
    ext = train_extractor(ds, epochs=e.epochs, batch_size=e.batch_size, lr=e.lr, seed=cfg.seed,
                          feature_dim=e.feature_dim)
    ext.save(out)
    print(f"extractor saved to {out} (held-out accuracy {ext.meta['holdout_accuracy']})")
    _write_run_json(out.parent, args, cfg, started, extractor=str(out))
    return EXIT_OK


def cmd_train_labelnet(args) -> int:
    started = _now()
    cfg = _load_cfg(args)
    ds = ManifestDataset(_manifest(cfg))
    out = _out_file(args, cfg.resolve(cfg.paths.labelnet), "labelnet.pt")
    _check_overwrite(out, args.force)
    table = cfg.word_table()
    k = ds.ontology.num_sub if ds.ontology else int(ds.sub.max()) + 1
    model, report = train_label_predictor(cfg.labelnet_config(k), zip(ds.texts, ds.sub.tolist()), table)
    save_label_predictor(model, out, report, word_vectors=table.describe())
    acc = report.heldout_accuracy[-1] if report.heldout_accuracy else None
    print(f"label predictor saved to {out} (held-out accuracy {acc})")
    _write_run_json(out.parent, args, cfg, started, labelnet=str(out))
    return EXIT_OK


def cmd_train(args) -> int:
    started = _now()
    cfg = _load_cfg(args)
    ds = ManifestDataset(_manifest(cfg))
    if ds.ontology is None:
        raise CliError(f"dataset at {ds.root} has no ontology.json")
    out = Path(args.out) if args.out else cfg.resolve(cfg.paths.out)
    if not args.resume:
        _check_overwrite(out / LOG_NAME, args.force)
    table = cfg.word_table()
    use_ontology = not args.baseline
    gcfg = cfg.gan_config(ds.ontology, use_ontology)
    hook = None
    if cfg.schedule.metrics_every:
        from .metrics import in_loop_metrics
        hook = in_loop_metrics(ds, table, seed=cfg.seed)
    fn = train_baseline if args.baseline else train
    try:
        res = fn(gcfg, cfg.train_schedule(), ds, table, out, ds.ontology, resume=args.resume,
                 metrics_hook=hook)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}\ndiagnostic checkpoint: {exc.checkpoint}", file=sys.stderr)
        _write_run_json(out, args, cfg, started, aborted=str(exc.checkpoint))
        return EXIT_NUMERIC
    print(f"trained {res.steps} steps to stage {res.stage}; checkpoint {res.checkpoint}")
    _write_run_json(out, args, cfg, started, variant="baseline-category-only" if args.baseline else "ogan",
                    checkpoint=str(res.checkpoint))
    return EXIT_OK


ROW_NAMES = {"baseline-category-only": "Vanilla PGAN (category-only)", "ogan": "O-GAN"}


def format_table(reports: list[tuple[str, dict]]) -> str:
    """Table-1 shaped summary: IS (higher better) and FID (lower better), plus conditioning probes."""
    corner = "method \\ measure"
    width = max([34] + [len(name) + 1 for name, _ in reports])
    head = f"{corner:<{width}} {'IS ↑':^16} {'FID ↓':>10} {'CE ↓':>8} {'L2 ↓':>8}"
    lines = [head, "-" * len(head)]

    def is_cell(mean, std, splits):
        # a spread only exists with more than one split
        return f"{mean:>8.2f} ± {std:<5.2f}" if splits > 1 else f"{mean:>8.2f}        "

    if reports:
        r0 = reports[0][1]
        cell = is_cell(r0["real_is_mean"], r0["real_is_std"], r0.get("n_splits", 1))
        lines.append(f"{'Real Images':<{width}} {cell} {0:>10.2f} {'':>8} {'':>8}")
        lines.append("-" * len(head))
    for name, r in reports:
        cell = is_cell(r["is_mean"], r["is_std"], r.get("n_splits", 1))
        lines.append(f"{name:<{width}} {cell} {r['fid']:>10.2f} {r['cond_ce']:>8.4f} {r['cond_l2']:>8.4f}")
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    started = _now()
    cfg = _load_cfg(args)
    ckpts = [_require(Path(c), "checkpoint") for c in args.checkpoints]
    ext_path = cfg.resolve(cfg.paths.extractor)
    if not ext_path.exists():
        raise CliError(f"feature extractor not found: {ext_path}; run `ogan train-extractor` first")
    extractor = load_extractor(ext_path)
    ds = ManifestDataset(_manifest(cfg))
    table = cfg.word_table()
    m = cfg.metrics
    out = Path(args.out) if args.out else cfg.resolve(cfg.paths.out) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for ck in ckpts:
        rep = evaluate(ck, ds, table, extractor, n_real=m.n_real, n_fake=m.n_fake, seed=cfg.seed,
                       n_splits=m.n_splits, batch=m.batch)
        run = ck.parent.parent.name if ck.parent.name == "ckpt" else ck.parent.name
        stem = f"{run}_{ck.stem}" if run else ck.stem
        (out / f"report_{stem}.json").write_text(rep.to_json(), encoding="utf-8")
        rows.append((f"{ROW_NAMES.get(rep.variant, rep.variant)} [{run}]", rep.to_dict()))
    table_txt = format_table(rows)
    (out / "table.txt").write_text(table_txt, encoding="utf-8")
    print(table_txt, end="")
    _write_run_json(out, args, cfg, started, checkpoints=[str(c) for c in ckpts])
    return EXIT_OK


def _grid(images: np.ndarray, cols: int) -> np.ndarray:
    n, h, w, c = images.shape
    rows = -(-n // cols)
    canvas = np.full((rows * h, cols * w, c), 255, dtype=np.uint8)
    for i, im in enumerate(images):
        r, q = divmod(i, cols)
        canvas[r * h:(r + 1) * h, q * w:(q + 1) * w] = im
    return canvas


@torch.no_grad()
def cmd_sample(args) -> int:
    started = _now()
    cfg = _load_cfg(args)
    ck = _require(Path(args.checkpoint), "checkpoint")
    gan, payload = load_gan(ck)
    from .ontology import Ontology
    ontology = Ontology.from_dict(payload["extra"]["ontology"])
    table = cfg.word_table()
    sidecar = {"text": args.text, "checkpoint": str(ck), "seed": cfg.seed,
               "variant": payload["extra"].get("variant")}
    if args.label:
        try:
            sub = ontology.sub_index(args.label)
        except OntologyError:
            raise CliError(f"unknown --label {args.label!r}; choices: {', '.join(ontology.sub_names)}") from None
        sidecar.update(label=args.label, label_source="forced")
    else:
        lp = cfg.resolve(cfg.paths.labelnet)
        if not lp.exists():
            raise CliError(f"label predictor not found: {lp}; run `ogan train-labelnet` or pass --label")
        model, _ = load_label_predictor(lp)
        pred = predict_label(model, table, args.text)
        sub = pred.index
        sidecar.update(label=ontology.sub_names[sub], label_source="predicted",
                       probabilities={n: float(p) for n, p in zip(ontology.sub_names, pred.probs)},
                       empty_input=pred.empty_input)
    y_index = sub if gan.cfg.use_ontology else parent_of(ontology, sub)
    emb = embed_text_average(table, args.text)
    n = args.count
    gen = torch.Generator().manual_seed(cfg.seed)
    z = torch.rand(n, gan.cfg.d_z, generator=gen) * 2.0 - 1.0
    e = torch.as_tensor(emb.vector).expand(n, -1)
    y = torch.nn.functional.one_hot(torch.full((n,), y_index), gan.cfg.num_labels).float()
    imgs = gan.G(torch.cat([z, e, y], dim=1), gan.stage)
    arr = ((imgs.permute(0, 2, 3, 1).numpy() + 1.0) * 127.5).round().clip(0, 255).astype(np.uint8)
    out = Path(args.out) if args.out else cfg.resolve(cfg.paths.out) / "samples"
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_grid(arr, min(n, 8))).save(out / "samples.png")
    sidecar.update(conditioning_label_index=int(y_index), count=n, token_count=emb.token_count)
    (out / "samples.json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {n} samples for label {sidecar['label']!r} to {out / 'samples.png'}")
    _write_run_json(out, args, cfg, started)
    return EXIT_OK


def cmd_plot(args) -> int:
    if not args.logs:
        raise CliError("plot needs at least one log file")
    for p in args.logs:
        _require(Path(p), "log file")
    started = _now()
    out = Path(args.out) if args.out else Path(".")
    paths = plot_logs(args.logs, out)
    for p in paths:
        print(p)
    _write_run_json(out, args, None, started, logs=[str(p) for p in args.logs],
                    figures=[p.name for p in paths])
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ogan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", metavar="PATH", help="experiment TOML file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        return p

    common(sub.add_parser("gen-data", help="render the synthetic dataset")).set_defaults(func=cmd_gen_data)
    common(sub.add_parser("train-extractor", help="fit the FID/IS feature extractor")).set_defaults(
        func=cmd_train_extractor)
    common(sub.add_parser("train-labelnet", help="fit the text-to-label predictor")).set_defaults(
        func=cmd_train_labelnet)
    p = common(sub.add_parser("train", help="progressive GAN training"))
    p.add_argument("--baseline", action="store_true", help="category-only conditioning")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.set_defaults(func=cmd_train)
    p = common(sub.add_parser("eval", help="FID, IS and conditioning metrics"))
    p.add_argument("checkpoints", nargs="+")
    p.set_defaults(func=cmd_eval)
    p = common(sub.add_parser("sample", help="generate images from a description"))
    p.add_argument("checkpoint")
    p.add_argument("--text", required=True)
    p.add_argument("--label", help="sub-category name; skips the label predictor")
    p.add_argument("--count", type=int, default=16)
    p.set_defaults(func=cmd_sample)
    p = common(sub.add_parser("plot", help="conditioning curves from training logs"), config=False)
    p.add_argument("logs", nargs="*")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "plot" and not args.logs:
        parser.error("plot: at least one log file is required")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"ogan {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, OntologyError, DatasetError, WordVectorError, CheckpointError,
            MetricError, TrainError, PlotError, FileNotFoundError) as exc:
        print(f"ogan {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
