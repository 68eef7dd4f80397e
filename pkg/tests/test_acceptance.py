"""Acceptance criteria 1-8, one test each.

Every test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line (also repeated in
the terminal summary) and then asserts the same condition. Criteria 6 and 7
train full 32x32 models on the desk config and take most of the runtime
(about 90 minutes on one CPU core).
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import tomli_w

import checks
import ogan.trainer as trainer
from ogan.cli import format_table, main
from ogan.config import load_config
from ogan.labelnet import train_label_predictor
from ogan.metrics import evaluate, train_extractor
from ogan.synthdata import DatasetSpec, ManifestDataset, example_seed, generate_dataset, render_example
from ogan.textemb import TextEmbedding
from ogan.trainer import train, train_baseline

from conftest import ACCEPTANCE_EXTRA, ACCEPTANCE_LINES, EXAMPLE_ONTOLOGY, ROOT

DESK = ROOT / "configs" / "desk.toml"
TINY = ROOT / "configs" / "tiny.toml"
SEEDS = (0, 1, 2)


def report(n: int, ok: bool, detail: str):
    line = f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def run_checks(fns):
    results = [(fn.__name__.removeprefix("check_"), *fn()) for fn in fns]
    ok = all(bool(r[1]) for r in results)
    return ok, "; ".join(f"{name}: {detail}" for name, _, detail in results)


def tree_digest(root: Path, skip=("run.json",)) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in skip:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------- 1-3: oracles


def test_criterion_1_metric_oracles():
    t0 = time.perf_counter()
    ok, detail = run_checks([checks.check_fid_analytic, checks.check_fid_oracle,
                             checks.check_is_analytic, checks.check_matrix_sqrt])
    dt = time.perf_counter() - t0
    report(1, ok and dt < 60, f"{detail}; {dt:.1f}s (< 60s)")


def test_criterion_2_loss_correctness():
    t0 = time.perf_counter()
    ok, detail = run_checks([checks.check_gp_linear, checks.check_loss_gradients,
                             checks.check_head_analytic])
    dt = time.perf_counter() - t0
    report(2, ok and dt < 300, f"{detail}; {dt:.1f}s (< 300s)")


def test_criterion_3_progressive_growing():
    t0 = time.perf_counter()
    ok, detail = run_checks([checks.check_blend, checks.check_grow_preserves,
                             checks.check_head_isolation])
    dt = time.perf_counter() - t0
    report(3, ok and dt < 60, f"{detail}; {dt:.1f}s (< 60s)")


# ---------------------------------------------------------------- 4: determinism


def test_criterion_4_determinism(tmp_path, ontology, monkeypatch):
    cfg = load_config(TINY)
    table = cfg.word_table()
    digests = {}
    for run in ("a", "b"):
        d = tmp_path / run
        generate_dataset(DatasetSpec(ontology, 300, resolution=32, seed=cfg.seed), d / "data")
        ds = ManifestDataset(d / "data" / "manifest.jsonl")
        ext = train_extractor(ds, epochs=1, seed=cfg.seed)
        ext.save(d / "extractor.pt")
        gcfg = cfg.gan_config(ontology).to_dict()
        gcfg.update(channels=[16, 8, 8], max_resolution=16)
        sched = cfg.train_schedule()
        sched.max_steps = None
        res = train(type(cfg.gan_config(ontology)).from_dict(gcfg), sched, ds, table, d / "train")
        # reports name checkpoints by file name, so equal runs give equal bytes
        monkeypatch.chdir(d / "train")
        rep = evaluate(Path("ckpt") / res.checkpoint.name, ds, table, ext, n_real=200, n_fake=200,
                       seed=cfg.seed, batch=100)
        (d / "report.json").write_text(rep.to_json())
        digests[run] = {
            "dataset": tree_digest(d / "data"),
            "train_log": hashlib.sha256((d / "train" / "train_log.jsonl").read_bytes()).hexdigest(),
            "checkpoint": hashlib.sha256(res.checkpoint.read_bytes()).hexdigest(),
            "extractor": hashlib.sha256((d / "extractor.pt").read_bytes()).hexdigest(),
            "report": hashlib.sha256((d / "report.json").read_bytes()).hexdigest(),
        }
    same = {k: digests["a"][k] == digests["b"][k] for k in digests["a"]}
    report(4, all(same.values()), ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))


# ---------------------------------------------------------------- 5: labelnet


def test_criterion_5_labelnet(ontology):
    cfg = load_config(DESK)
    t0 = time.perf_counter()
    spec = DatasetSpec(ontology, 3000, resolution=4, seed=cfg.seed)
    corpus = [(e.text, e.sub_index) for e in
              (render_example(spec, example_seed(cfg.seed, i)) for i in range(3000))]
    _, rep = train_label_predictor(cfg.labelnet_config(ontology.num_sub), corpus, cfg.word_table())
    dt = time.perf_counter() - t0
    acc = rep.heldout_accuracy[-1]
    report(5, acc >= 0.95 and dt < 600,
           f"held-out accuracy {acc:.4f} on {rep.n_heldout} of 3000 texts, K=6 (>= 0.95); {dt:.1f}s (< 600s)")


# ---------------------------------------------------------------- 6-7: desk training


class DeskRuns:
    """Lazily trains and evaluates (variant, seed) runs on one shared dataset."""

    def __init__(self, root: Path):
        self.root = root
        self.cfg = load_config(DESK)
        self.ontology = None
        self.ds = None
        self.extractor = None
        self.cache = {}

    def _setup(self):
        if self.ds is not None:
            return
        from ogan.ontology import load_ontology

        self.ontology = load_ontology(EXAMPLE_ONTOLOGY)
        d = self.root / "data"
        generate_dataset(DatasetSpec(self.ontology, self.cfg.data.num_examples,
                                     self.cfg.data.resolution, self.cfg.seed), d)
        self.ds = ManifestDataset(d / "manifest.jsonl")
        e = self.cfg.extractor
        self.extractor = train_extractor(self.ds, epochs=e.epochs, batch_size=e.batch_size, lr=e.lr,
                                         seed=self.cfg.seed, feature_dim=e.feature_dim)
        self.table = self.cfg.word_table()

    def get(self, variant: str, seed: int) -> dict:
        key = (variant, seed)
        if key in self.cache:
            return self.cache[key]
        self._setup()
        self.cfg.seed = seed
        use = variant == "ogan"
        out = self.root / f"{variant}-seed{seed}"
        t0 = time.perf_counter()
        fn = train if use else train_baseline
        res = fn(self.cfg.gan_config(self.ontology, use), self.cfg.train_schedule(), self.ds,
                 self.table, out, self.ontology)
        train_s = time.perf_counter() - t0
        m = self.cfg.metrics
        rep = evaluate(res.checkpoint, self.ds, self.table, self.extractor, n_real=m.n_real,
                       n_fake=m.n_fake, seed=seed, n_splits=m.n_splits, batch=m.batch)
        stages_done = sorted(int(p.stem[5:]) for p in (out / "ckpt").glob("stage*.pt"))
        self.cache[key] = {"report": rep.to_dict(), "train_s": train_s, "stages": stages_done,
                           "steps": res.steps, "out": out}
        (out / "report.json").write_text(rep.to_json())
        return self.cache[key]


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    return DeskRuns(tmp_path_factory.mktemp("desk"))


def test_criterion_6_end_to_end(desk):
    run = desk.get("ogan", 0)
    r = run["report"]
    k = desk.ontology.num_sub
    nan = list((run["out"] / "ckpt").glob("nan_*.pt"))
    ok = (len(run["stages"]) >= 3 and not nan and r["cond_ce"] < math.log(k)
          and r["cond_l2"] < r["cond_l2_shuffled"] and run["train_s"] <= 4 * 3600)
    report(6, ok,
           f"{len(run['stages'])} stages completed ({run['steps']} steps, 32x32, no NaN abort: {not nan}); "
           f"cond CE {r['cond_ce']:.4f} < ln {k} = {math.log(k):.4f}; "
           f"cond L2 {r['cond_l2']:.4f} < shuffled {r['cond_l2_shuffled']:.4f}; "
           f"FID {r['fid']:.1f}, IS {r['is_mean']:.2f}; train {run['train_s'] / 60:.1f} min (<= 240)")


def test_criterion_7_ablation_direction(desk):
    rows, wins, lines = [], 0, []
    for seed in SEEDS:
        o = desk.get("ogan", seed)["report"]
        b = desk.get("baseline-category-only", seed)["report"]
        win = o["cond_l2"] <= b["cond_l2"]
        wins += win
        lines.append(f"seed {seed}: L2 O-GAN {o['cond_l2']:.4f} vs baseline {b['cond_l2']:.4f} "
                     f"({'O-GAN <=' if win else 'reversed'}); FID {o['fid']:.1f} vs {b['fid']:.1f}")
        rows += [(f"Vanilla PGAN (category-only) [seed {seed}]", b), (f"O-GAN [seed {seed}]", o)]
    table = format_table(rows)
    print(table)
    ACCEPTANCE_EXTRA.append("Table-1-shaped summary (desk config, synthetic data):\n" + table
                            + "\n".join(lines))
    report(7, wins >= 2, f"O-GAN conditioning L2 <= baseline in {wins}/3 seeds (need >= 2); "
           + "; ".join(lines))


# ---------------------------------------------------------------- 8: CLI


def test_criterion_8_cli_contract(tmp_path, monkeypatch, capsys):
    t0 = time.perf_counter()
    doc = load_config(TINY).to_dict()
    doc["paths"].update(ontology=str(EXAMPLE_ONTOLOGY), dataset="data", extractor="extractor.pt",
                        labelnet="labelnet.pt", out="train")
    cfg = tmp_path / "tiny.toml"
    cfg.write_text(tomli_w.dumps(doc))
    bad = tmp_path / "bad.toml"
    bad.write_text(tomli_w.dumps({**doc, "paths": {**doc["paths"], "ontology": "missing.json",
                                                   "extractor": "none.pt"}}))
    c = ["--config", str(cfg)]
    ck = str(tmp_path / "train" / "ckpt" / "final.pt")
    bk = str(tmp_path / "base" / "ckpt" / "final.pt")
    results = {}

    def expect(name, code, argv, artifact=None):
        try:
            got = main(argv)
        except SystemExit as exc:
            got = exc.code
        ok = got == code and (artifact is None or Path(artifact).exists())
        results[name] = (ok, got)

    expect("gen-data", 0, ["gen-data", *c], tmp_path / "data" / "manifest.jsonl")
    expect("gen-data exists", 3, ["gen-data", *c])
    expect("gen-data --force", 0, ["gen-data", *c, "--force"], tmp_path / "data" / "run.json")
    expect("gen-data missing ontology", 2, ["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")])
    expect("train-extractor", 0, ["train-extractor", *c], tmp_path / "extractor.pt")
    expect("train-labelnet", 0, ["train-labelnet", *c], tmp_path / "labelnet.pt")
    expect("train", 0, ["train", *c], ck)
    expect("train exists", 3, ["train", *c])
    expect("train --baseline", 0, ["train", *c, "--baseline", "--out", str(tmp_path / "base")], bk)
    short = tmp_path / "short.toml"
    short.write_text(tomli_w.dumps({**doc, "schedule": {**doc["schedule"], "max_steps": 90}}))
    expect("train partial", 0, ["train", "--config", str(short), "--out", str(tmp_path / "r")])
    expect("train --resume", 0, ["train", *c, "--out", str(tmp_path / "r"), "--resume"])
    resumed_same = ((tmp_path / "r" / "train_log.jsonl").read_bytes()
                    == (tmp_path / "train" / "train_log.jsonl").read_bytes())
    results["resume byte-identical log"] = (resumed_same, resumed_same)
    with monkeypatch.context() as mp:
        mp.setattr(trainer, "embed_text_average",
                   lambda table, text: TextEmbedding(np.full(table.dim, np.nan, np.float32), 1, []))
        expect("train NaN abort", 4, ["train", *c, "--out", str(tmp_path / "nan")])
    expect("eval", 0, ["eval", *c, ck, bk, "--out", str(tmp_path / "eval")], tmp_path / "eval" / "table.txt")
    expect("eval missing extractor", 2, ["eval", "--config", str(bad), ck])
    expect("eval missing checkpoint", 2, ["eval", *c, str(tmp_path / "nope.pt")])
    expect("sample predicted", 0, ["sample", *c, ck, "--text", "red cotton tshirt", "--out", str(tmp_path / "s")],
           tmp_path / "s" / "samples.json")
    expect("sample forced", 0, ["sample", *c, ck, "--text", "x", "--label", "tshirt", "--out", str(tmp_path / "t")],
           tmp_path / "t" / "samples.png")
    expect("sample unknown label", 2, ["sample", *c, ck, "--text", "x", "--label", "kilt"])
    logs = [str(tmp_path / "train" / "train_log.jsonl"), str(tmp_path / "base" / "train_log.jsonl")]
    expect("plot", 0, ["plot", *logs, "--out", str(tmp_path / "p")], tmp_path / "p" / "fig3c_ce.png")
    expect("plot no logs", 2, ["plot"])
    capsys.readouterr()
    runs = [tmp_path / d / "run.json" for d in ("data", "train", "base", "eval", "s", "p")]
    results["run.json provenance"] = (all(p.exists() for p in runs), sum(p.exists() for p in runs))
    dt = time.perf_counter() - t0
    failed = [f"{k} (got {v[1]})" for k, v in results.items() if not v[0]]
    report(8, not failed and dt < 600,
           f"{len(results) - len(failed)}/{len(results)} contract checks"
           + (f", failed: {', '.join(failed)}" if failed else "") + f"; {dt:.1f}s (< 600s)")
