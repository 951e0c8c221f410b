"""Pipeline stages. Each reads its inputs from ``cfg.out_dir``, writes its
outputs there, and records a manifest.

Layout under the output directory::

    data/        IDX files for the public, private-train and private-holdout sets, split.json
    models/      target.ckpt, evaluator.ckpt, generator.ckpt
    attacks/     <method>/class<c>/{images.pgm, images.f64, trajectory.csv, banks.ckpt, result.json}
    reports/     metrics.csv, summary.csv, sweep.csv, theory.csv
    grids/       <method>.pgm
    manifests/   <stage>.json
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import artifacts as art
from .attack import baseline_of, run_attack
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    SplitSpec,
    load_idx,
    save_idx,
    split_public_private,
    synth_digits,
    train_holdout_split,
)
from .errors import ContractError
from .metrics import REPORT_COLUMNS, build_report, mean_report, reports_from_csv, reports_to_csv
from .models import Classifier, GeneratorConfig, TrainConfig, pretrain_generator, train_classifier
from .numerics import Rng
from .theory import rows_to_csv, run_suite

log = logging.getLogger(__name__)

METHODS = ("dmmia", "baseline")
DATA_FILES = ("public", "train", "holdout")


def _seed(cfg, label):
    return Rng(cfg.seed).spawn(label).seed


def _paths(cfg):
    out = cfg.out
    return {
        "data": out / "data",
        "models": out / "models",
        "attacks": out / "attacks",
        "reports": out / "reports",
        "grids": out / "grids",
    }


def _idx_pair(cfg, name):
    d = _paths(cfg)["data"]
    return d / f"{name}-images.idx", d / f"{name}-labels.idx"


def _with_digest(cfg, text):
    return f"# config_digest={cfg.digest()}\n{text}"


def _strip_digest(cfg, text, what, force=False):
    first, _, rest = text.partition("\n")
    if not first.startswith("# config_digest="):
        raise ContractError(f"{what} has no config digest line")
    art.check_digest(first.split("=", 1)[1], cfg.digest(), what, force)
    return rest


# -- data ----------------------------------------------------------------------

def prepare_data(cfg, force=False):
    m = art.Manifest("prepare-data", cfg.digest(), cfg.seed)
    d = cfg.data
    if d.source == "synthetic":
        labels = sorted(set(d.public_labels) | set(d.private_labels))
        full = synth_digits(
            Rng(cfg.seed).spawn("data"), d.n_per_class, classes=max(labels) + 1,
            noise=d.noise, max_shift=d.max_shift, vertex_jitter=d.vertex_jitter,
        )
    else:
        art.require(Path(d.images), Path(d.labels))
        full = load_idx(d.images, d.labels)
        m.input(d.images, "")
        m.input(d.labels, "")
    public, private, mapping = split_public_private(full, SplitSpec(d.public_labels, d.private_labels))
    train, holdout = train_holdout_split(private, Rng(cfg.seed).spawn("holdout"), d.holdout_fraction)
    data_dir = _paths(cfg)["data"]
    data_dir.mkdir(parents=True, exist_ok=True)
    for name, ds in zip(DATA_FILES, (public, train, holdout)):
        img, lab = _idx_pair(cfg, name)
        save_idx(ds, img, lab)
        m.output(img)
        m.output(lab)
    split = {"config_digest": cfg.digest(), "private_mapping": {str(k): v for k, v in mapping.items()},
             "sizes": {"public": len(public), "train": len(train), "holdout": len(holdout)}}
    art.write_json(data_dir / "split.json", split)
    m.output(data_dir / "split.json")
    m.write(cfg.out)
    return split


def load_split(cfg, force=False):
    data_dir = _paths(cfg)["data"]
    pairs = [_idx_pair(cfg, n) for n in DATA_FILES]
    art.require(data_dir / "split.json", *[p for pair in pairs for p in pair])
    split = art.read_json(data_dir / "split.json")
    art.check_digest(split["config_digest"], cfg.digest(), "data/split.json", force)
    return {name: load_idx(*pair) for name, pair in zip(DATA_FILES, pairs)}


# -- models --------------------------------------------------------------------

def _train(cfg, section, label, force):
    data = load_split(cfg, force)
    k = len(cfg.data.private_labels)
    tc = TrainConfig(epochs=section.epochs, lr=section.lr, batch_size=section.batch_size,
                     seed=_seed(cfg, label), hidden=tuple(section.hidden))
    clf = train_classifier(data["train"], tc, holdout=data["holdout"], n_classes=k)
    path = _paths(cfg)["models"] / f"{label}.ckpt"
    save_checkpoint(clf, path, config_digest=cfg.digest())
    m = art.Manifest(f"train-{label}", cfg.digest(), cfg.seed)
    m.input(_paths(cfg)["data"] / "split.json", cfg.digest())
    m.output(path)
    m.body["accuracy"] = dict(clf.metadata)
    m.write(cfg.out)
    return clf


def train_target(cfg, force=False):
    return _train(cfg, cfg.target, "target", force)


def train_eval(cfg, force=False):
    return _train(cfg, cfg.evaluator, "evaluator", force)


def pretrain(cfg, force=False):
    data = load_split(cfg, force)
    g = cfg.generator
    gc = GeneratorConfig(mode=g.mode, z_dim=g.z_dim, w_dim=g.w_dim, hidden=g.hidden, epochs=g.epochs, lr=g.lr,
                         batch_size=g.batch_size, prior_std=g.prior_std, kl_weight=g.kl_weight,
                         mse_threshold=g.mse_threshold, seed=_seed(cfg, "generator"))
    gen = pretrain_generator(data["public"], gc)
    path = _paths(cfg)["models"] / "generator.ckpt"
    save_checkpoint(gen, path, config_digest=cfg.digest(), synthesis_checksum=gen.synthesis_checksum())
    m = art.Manifest("pretrain-generator", cfg.digest(), cfg.seed)
    m.output(path)
    m.body["generator"] = dict(gen.metadata)
    m.write(cfg.out)
    return gen


def load_model(cfg, name, force=False):
    path = _paths(cfg)["models"] / f"{name}.ckpt"
    art.require(path)
    model = load_checkpoint(path)
    art.check_digest(model.checkpoint_metadata.get("config_digest"), cfg.digest(), f"models/{name}.ckpt", force)
    return model


# -- attack --------------------------------------------------------------------

def attack_classes(cfg):
    return list(cfg.attack.classes) or list(range(len(cfg.data.private_labels)))


def attack_config(cfg, target_class, method, **changes):
    base = cfg.attack.base_config(_seed(cfg, f"attack/class{target_class}")).replace(
        target_class=target_class, **changes)
    return baseline_of(base) if method == "baseline" else base


def _result_dir(cfg, method, c):
    return _paths(cfg)["attacks"] / method / f"class{c}"


def _save_result(cfg, method, c, result):
    out = _result_dir(cfg, method, c)
    out.mkdir(parents=True, exist_ok=True)
    art.atomic_write(out / "images.pgm", art.render_grid(result.images, 10))
    art.atomic_write(out / "images.f64", art.encode_raw(result.images))
    art.write_text(out / "trajectory.csv", _with_digest(cfg, result.trajectory_csv()))
    save_checkpoint(result.banks, out / "banks.ckpt", config_digest=cfg.digest())
    art.write_json(out / "result.json", {
        "config_digest": cfg.digest(),
        "attack_digest": result.config_digest,
        "attack": {k: v for k, v in vars(result.config).items()},
        "synthesis_checksum": result.synthesis_checksum,
        "selected": [int(i) for i in result.selected],
        "final_losses": [float(v) for v in result.trajectory[-1]],
    })


def attack(cfg, force=False, workers=None):
    target = load_model(cfg, "target", force)
    gen = load_model(cfg, "generator", force)
    before = gen.synthesis_checksum()
    jobs = [(method, c) for method in cfg.attack.methods for c in attack_classes(cfg)]

    def one(job):
        method, c = job
        result = run_attack(attack_config(cfg, c, method), target, gen)
        _save_result(cfg, method, c, result)
        return job, result.synthesis_checksum

    workers = workers or cfg.attack.workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(one, jobs))
    else:
        done = [one(j) for j in jobs]
    m = art.Manifest("attack", cfg.digest(), cfg.seed)
    m.input(_paths(cfg)["models"] / "target.ckpt", cfg.digest())
    m.input(_paths(cfg)["models"] / "generator.ckpt", cfg.digest())
    for (method, c), checksum in done:
        if checksum != before:
            raise ContractError(f"synthesis checksum changed in {method} class {c}")
        m.output(_result_dir(cfg, method, c))
    m.body["synthesis_checksum"] = before
    m.write(cfg.out)
    return done


def load_result_images(cfg, method, c, force=False):
    out = _result_dir(cfg, method, c)
    art.require(out / "result.json", out / "images.f64")
    meta = art.read_json(out / "result.json")
    art.check_digest(meta["config_digest"], cfg.digest(), f"attacks/{method}/class{c}", force)
    return art.decode_raw((out / "images.f64").read_bytes())


# -- evaluation ----------------------------------------------------------------

def _prdc_k(cfg):
    return cfg.metrics.prdc_k or None


def evaluate(cfg, force=False):
    ev = load_model(cfg, "evaluator", force)
    train = load_split(cfg, force)["train"]
    reports = []
    for method in cfg.attack.methods:
        for c in attack_classes(cfg):
            images = load_result_images(cfg, method, c, force)
            reports.append(build_report(ev, images, train.of_class(c).images, c, method, _prdc_k(cfg)))
    path = _paths(cfg)["reports"] / "metrics.csv"
    art.write_text(path, _with_digest(cfg, reports_to_csv(reports)))
    m = art.Manifest("evaluate", cfg.digest(), cfg.seed)
    m.output(path)
    m.write(cfg.out)
    return reports


def report(cfg, force=False):
    """Per-method means of the evaluation CSV, plus one PGM grid per method (a row per class)."""
    path = _paths(cfg)["reports"] / "metrics.csv"
    art.require(path)
    reports = reports_from_csv(_strip_digest(cfg, path.read_text(), "reports/metrics.csv", force))
    means = [mean_report([r for r in reports if r.method == meth], meth)
             for meth in cfg.attack.methods if any(r.method == meth for r in reports)]
    summary = _paths(cfg)["reports"] / "summary.csv"
    art.write_text(summary, _with_digest(cfg, reports_to_csv(means)))
    m = art.Manifest("report", cfg.digest(), cfg.seed)
    m.output(summary)
    for method in cfg.attack.methods:
        classes = [c for c in attack_classes(cfg) if (_result_dir(cfg, method, c) / "images.f64").exists()]
        if not classes:
            continue
        rows = [load_result_images(cfg, method, c, force)[:10] for c in classes]
        cols = max(len(r) for r in rows)
        tiles = np.concatenate([np.concatenate([r, np.zeros((cols - len(r), 28, 28))]) for r in rows])
        grid = _paths(cfg)["grids"] / f"{method}.pgm"
        art.atomic_write(grid, art.render_grid(tiles, cols))
        m.output(grid)
    m.write(cfg.out)
    return means


def format_table(reports):
    cols = ["method", "acc1", "acc5", "l2_eval", "cos_eval", "fid", "precision", "recall", "density", "coverage", "div"]
    lines = ["  ".join(f"{c:>9}" for c in cols)]
    for r in reports:
        vals = [r.method] + [f"{getattr(r, c):.4f}" for c in cols[1:]]
        lines.append("  ".join(f"{v:>9}" for v in vals))
    return "\n".join(lines)


# -- sweep & theory ------------------------------------------------------------

SWEEP_KEYS = ("lambda_imr", "lambda_idr", "n_prototypes", "n_positive", "momentum")


def sweep_cells(cfg):
    base = cfg.attack.base_config(cfg.seed)
    axes = [getattr(cfg.sweep, k) or [getattr(base, k)] for k in SWEEP_KEYS]
    return [dict(zip(SWEEP_KEYS, combo)) for combo in itertools.product(*axes)]


def sweep(cfg, force=False):
    target = load_model(cfg, "target", force)
    gen = load_model(cfg, "generator", force)
    ev = load_model(cfg, "evaluator", force)
    train = load_split(cfg, force)["train"]
    metric_cols = [c for c in REPORT_COLUMNS if c not in ("target_class", "method")]
    lines = [",".join(list(SWEEP_KEYS) + metric_cols)]
    for cell in sweep_cells(cfg):
        reports = []
        for c in attack_classes(cfg):
            result = run_attack(attack_config(cfg, c, "dmmia", **cell), target, gen)
            reports.append(build_report(ev, result.images, train.of_class(c).images, c, "dmmia", _prdc_k(cfg)))
        mean = mean_report(reports)
        lines.append(",".join([repr(cell[k]) for k in SWEEP_KEYS] + [repr(float(getattr(mean, c))) for c in metric_cols]))
    path = _paths(cfg)["reports"] / "sweep.csv"
    art.write_text(path, _with_digest(cfg, "\n".join(lines) + "\n"))
    m = art.Manifest("sweep", cfg.digest(), cfg.seed)
    m.output(path)
    m.write(cfg.out)
    return lines


def theory_check(cfg, force=False):
    """Theory suite on a randomly initialized classifier of the target's shape.

    Trained classifiers are often confident enough that some class
    probability underflows the degeneracy floor at random inputs; a fresh
    network keeps every probe well-conditioned.
    """
    k = len(cfg.data.private_labels)
    clf = Classifier(k, tuple(cfg.target.hidden), seed=_seed(cfg, "theory-net"))
    t = cfg.theory
    rows = run_suite(clf, Rng(cfg.seed).spawn("theory"), t.n_probes, t.mc_samples, tuple(t.simplex_sizes))
    path = _paths(cfg)["reports"] / "theory.csv"
    art.write_text(path, _with_digest(cfg, rows_to_csv(rows)))
    m = art.Manifest("theory-check", cfg.digest(), cfg.seed)
    m.output(path)
    m.body["all_passed"] = all(r.passed for r in rows)
    m.write(cfg.out)
    return rows


STAGES = {
    "prepare-data": prepare_data,
    "train-target": train_target,
    "train-eval": train_eval,
    "pretrain-generator": pretrain,
    "attack": attack,
    "evaluate": evaluate,
    "report": report,
    "sweep": sweep,
    "theory-check": theory_check,
}

RUN_ALL = ("prepare-data", "train-target", "train-eval", "pretrain-generator", "attack", "evaluate", "report")


def run_all(cfg, force=False):
    out = None
    for name in RUN_ALL:
        out = STAGES[name](cfg, force=force)
    return out

