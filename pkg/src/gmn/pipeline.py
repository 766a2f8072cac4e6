"""End-to-end experiment steps shared by the CLI and the acceptance suite.

Each step takes an :class:`~gmn.config.ExperimentConfig`, optionally writes its
report files into a directory and returns the in-process results, so file
contents and returned numbers come from the same objects.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import reporting
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PRESETS, ExperimentConfig, canonical_preset
from .data import Dataset, generate_synthetic, load_embeddings, save_embeddings, split_probe_gallery
from .errors import ConfigError
from .evaluator import (EvalConfig, EvalReport, Protocol, domain_gap_diagnostic, evaluate,
                        linear_fit_r2, timing_compare)
from .trainer import LOG_COLUMNS, TrainState, build_model, init_state, pk_batch, train

log = logging.getLogger(__name__)

EVAL_COLUMNS = ("config", "protocol", "mAP", "R1", "R5", "R10", "num_valid_probes",
                "num_skipped_probes", "wall_seconds_similarity", "wall_seconds_ranking")


@dataclass
class Splits:
    train: Dataset
    probe: Dataset
    gallery: Dataset


def build_splits(cfg: ExperimentConfig) -> Splits:
    """Train / probe / gallery from the configured files or the synthetic generator.

    Synthetic data trains on every domain except the held-out ones, whose
    records are split per identity into probe and gallery.
    """
    d = cfg.data
    if d.train_path:
        if not (d.probe_path and d.gallery_path):
            raise ConfigError("data.train_path needs data.probe_path and data.gallery_path too")
        return Splits(load_embeddings(d.train_path), load_embeddings(d.probe_path),
                      load_embeddings(d.gallery_path))
    full = generate_synthetic(d.synthetic)
    held = set(cfg.heldout)
    domains = sorted(set(range(d.synthetic.num_domains)) - held)
    if not domains or not held <= set(range(d.synthetic.num_domains)):
        raise ConfigError(f"heldout_domains {sorted(held)} must be a proper subset of "
                          f"0..{d.synthetic.num_domains - 1}")
    train_set = full.select_domains(domains, role="train")
    probe, gallery = split_probe_gallery(full.select_domains(sorted(held)), d.probe_fraction,
                                         cfg.seed)
    return Splits(train_set, probe, gallery)


def generate(cfg: ExperimentConfig, out_dir) -> dict[str, Path]:
    splits = build_splits(cfg)
    out_dir = Path(out_dir)
    ext = ".gmne" if cfg.data.file_format == "binary" else ".tsv"
    paths = {}
    for name in ("train", "probe", "gallery"):
        paths[name] = save_embeddings(getattr(splits, name), out_dir / f"{name}{ext}",
                                      cfg.data.file_format)
    return paths


# training ----------------------------------------------------------------------


def _history_rows(state: TrainState) -> list[dict]:
    return [{"epoch": r.epoch, "lr": r.lr, **r.losses.as_dict()} for r in state.history]


def train_model(cfg: ExperimentConfig, splits: Splits, out_dir=None, resume=None,
                until_epoch=None, checkpoint_every: int = 0) -> TrainState:
    """Train under ``cfg.train``; with ``out_dir`` write the log, checkpoint and loss figure."""
    state = load_checkpoint(resume) if resume else None
    out = Path(out_dir) if out_dir else None
    log_path = out / "train_log.tsv" if out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        if state is None and log_path.exists():
            log_path.unlink()

    def on_epoch(st: TrainState):
        if out and checkpoint_every and st.epoch % checkpoint_every == 0:
            save_checkpoint(st, out / "checkpoint.gmnc")

    state, _ = train(cfg.train, splits.train, state=state, until_epoch=until_epoch,
                     log_path=log_path, on_epoch=on_epoch)
    if out:
        save_checkpoint(state, out / "checkpoint.gmnc")
        if state.history:
            reporting.plot_loss_curves(_history_rows(state), out / "loss_curves.png")
    return state


# evaluation --------------------------------------------------------------------


def eval_row(label: str, report: EvalReport) -> dict:
    row = {"config": label, "protocol": report.protocol, "mAP": report.mAP}
    for r, v in report.cmc.items():
        row[f"R{r}"] = v
    row.update(num_valid_probes=report.num_valid_probes,
               num_skipped_probes=report.num_skipped_probes,
               wall_seconds_similarity=report.wall_seconds_similarity,
               wall_seconds_ranking=report.wall_seconds_ranking)
    return row


def eval_protocols(model, requested: str = "auto") -> list[Protocol]:
    """``auto`` gives both feature and metric-net rows when the model has a metric net."""
    has_mnet = getattr(model, "mnet", None) is not None
    if requested == "auto":
        return [Protocol.FEATURE_EUCLIDEAN, Protocol.MNET] if has_mnet else [Protocol.FEATURE_EUCLIDEAN]
    proto = Protocol.parse(requested)
    if proto is Protocol.MNET and not has_mnet:
        raise ConfigError("MNET protocol requested but the checkpoint has no metric network "
                          "(trained with use_mnet=false)")
    return [proto]


def evaluate_model(cfg: ExperimentConfig, model, probe: Dataset, gallery: Dataset,
                   protocols=("auto",), out_dir=None, label: str = "") -> list[EvalReport]:
    chosen: list[Protocol] = []
    for p in protocols:
        chosen += [q for q in eval_protocols(model, p) if q not in chosen]
    reports = []
    for proto in chosen:
        ecfg = dataclasses.replace(cfg.eval, protocol=proto)
        reports.append(evaluate(probe, gallery, model, ecfg))
    if out_dir:
        out = Path(out_dir)
        label = label or cfg.preset
        rows = [eval_row(label, r) for r in reports]
        reporting.write_tsv(out / "eval.tsv", rows)
        reporting.write_json(out / "eval.json", {"config": label,
                                                 "reports": [r.as_dict() for r in reports]})
        reporting.write_text(out / "eval_table.txt", reporting.aligned_table(
            rows, ["protocol", "mAP"] + [f"R{r}" for r in cfg.eval.ranks]))
        reporting.plot_cmc({r.protocol: r.cmc_curve for r in reports}, out / "cmc.png")
    return reports


# ablation ----------------------------------------------------------------------


def first_batch_ids(cfg: ExperimentConfig, train_set: Dataset) -> np.ndarray:
    """Sample ids of the first batch training will draw (from a copy of the batch stream)."""
    state = init_state(cfg.train, train_set)
    rng = copy.deepcopy(state.rngs["batch"])
    idx = pk_batch(train_set, cfg.train.identities_per_batch, cfg.train.samples_per_identity, rng)
    return train_set.sample_ids[idx]


def _digest(ids) -> str:
    return hashlib.sha256(np.asarray(ids, dtype="<i8").tobytes()).hexdigest()[:16]


def preset_protocol(cfg: ExperimentConfig) -> Protocol:
    """Baseline is scored on features; metric-net presets use the configured protocol."""
    if not cfg.train.use_mnet:
        return Protocol.FEATURE_EUCLIDEAN
    return cfg.eval.protocol


def run_configuration(cfg: ExperimentConfig, label: str, splits: Splits | None = None) -> dict:
    splits = splits or build_splits(cfg)
    ids = first_batch_ids(cfg, splits.train)
    state, _ = train(cfg.train, splits.train)
    proto = preset_protocol(cfg)
    report = evaluate(splits.probe, splits.gallery, state.model,
                      dataclasses.replace(cfg.eval, protocol=proto))
    row = eval_row(label, report)
    row.update(seed=cfg.seed, first_batch=_digest(ids))
    log.info("%s seed %d: mAP %.4f R1 %.4f", label, cfg.seed, report.mAP, report.cmc.get(1, 0.0))
    return row


def parse_sweep(text: str) -> tuple[str, list[str]]:
    """``field=v1,v2`` on the ``train`` section, e.g. ``lam=0.1,1,2``."""
    key, sep, values = text.partition("=")
    vals = [v.strip() for v in values.split(",") if v.strip()]
    if not sep or not key.strip() or not vals:
        raise ConfigError(f"sweep must look like field=v1,v2,..., got {text!r}")
    return key.strip(), vals


def summarize(rows: list[dict], ranks=(1, 5, 10)) -> list[dict]:
    """Mean and std over seeds per configuration, in first-seen order."""
    labels = list(dict.fromkeys(r["config"] for r in rows))
    out = []
    for label in labels:
        group = [r for r in rows if r["config"] == label]
        s = {"config": label, "protocol": group[0]["protocol"], "seeds": len(group)}
        for m in ["mAP"] + [f"R{r}" for r in ranks]:
            vals = np.array([g[m] for g in group], dtype=float)
            s[m] = float(vals.mean())
            s[m + "_std"] = float(vals.std())
        out.append(s)
    return out


def run_ablation(cfg: ExperimentConfig, seeds, sweeps=(), out_dir=None,
                 presets=tuple(PRESETS)) -> tuple[list[dict], list[dict]]:
    """The four presets (and optional ``field=v1,v2`` sweeps on the full model) over paired seeds.

    Returns per-run rows and the per-configuration summary.
    """
    from .config import apply_overrides

    runs: list[tuple[str, ExperimentConfig]] = []
    for name in presets:
        runs.append((canonical_preset(name), cfg.with_preset(name)))
    full = cfg.with_preset("+A+B+C")
    for sweep in sweeps:
        key, values = parse_sweep(sweep)
        for v in values:
            runs.append((f"{key}={v}", apply_overrides(full, [f"train.{key}={v}"])))
    rows = []
    for seed in seeds:
        for label, run_cfg in runs:
            seeded = run_cfg.with_seed(int(seed))
            rows.append(run_configuration(seeded, label))
    summary = summarize(rows, cfg.eval.ranks)
    if out_dir:
        out = Path(out_dir)
        metrics = ["mAP"] + [f"R{r}" for r in cfg.eval.ranks]
        reporting.write_tsv(out / "ablation_runs.tsv", rows)
        reporting.write_tsv(out / "ablation.tsv", summary)
        reporting.write_json(out / "ablation.json", {"runs": rows, "summary": summary})
        reporting.write_text(out / "ablation_table.txt", reporting.aligned_table(
            summary, ["config", "protocol", "seeds"] + metrics))
        reporting.plot_ablation(summary, out / "ablation.png", metrics=("mAP", "R1"))
    return rows, summary


# diagnostics -------------------------------------------------------------------


def run_diagnose(cfg: ExperimentConfig, seeds, num_pairs_per_domain=200, out_dir=None) -> list[dict]:
    """Domain-gap diagnostic on freshly generated synthetic data for each seed."""
    rows = []
    for seed in seeds:
        spec = dataclasses.replace(cfg.data.synthetic, seed=int(seed))
        rep = domain_gap_diagnostic(generate_synthetic(spec), num_pairs_per_domain, int(seed))
        rows.append({"seed": int(seed), **rep.as_dict()})
    if out_dir:
        out = Path(out_dir)
        reporting.write_tsv(out / "domain_gap.tsv", rows)
        reporting.write_json(out / "domain_gap.json", {"runs": rows})
        reporting.write_text(out / "domain_gap_table.txt", reporting.aligned_table(
            rows, ["seed", "instance_space_accuracy", "pair_space_accuracy", "chance_level"]))
        reporting.plot_domain_gap(rows, out / "domain_gap.png")
    return rows


BENCH_SIZES = (1000, 2000, 4000, 8000)


def _random_set(n, d, rng, num_ids, role) -> Dataset:
    ids = rng.integers(0, num_ids, n)
    return Dataset(rng.standard_normal((n, d)), ids, np.zeros(n, np.int64),
                   rng.integers(0, 5, n), np.arange(n), role=role)


def run_bench(cfg: ExperimentConfig, sizes=BENCH_SIZES, n_probe=100, repeats=3, out_dir=None,
              model=None) -> dict:
    """Similarity and ranking wall time per protocol as the gallery grows.

    Timing does not depend on trained weights, so an untrained model with the
    configured architecture is used unless one is given.
    """
    rng = np.random.default_rng(cfg.seed)
    d_in = cfg.data.synthetic.d_in
    if model is None:
        tcfg = cfg.train.replace(use_mnet=True)
        model = build_model(tcfg, d_in, np.arange(10), rng)
    probe = _random_set(n_probe, d_in, rng, 50, "probe")
    base = dataclasses.replace(cfg.eval, single_threaded=True)
    rows = []
    for n_g in sizes:
        gallery = _random_set(int(n_g), d_in, rng, 50, "gallery")
        for t in timing_compare(probe, gallery, model,
                                [Protocol.FEATURE_EUCLIDEAN, Protocol.MNET], repeats, base):
            rows.append({"protocol": t.protocol, "n_probe": t.n_probe, "n_gallery": t.n_gallery,
                         "similarity_seconds": t.similarity_seconds,
                         "ranking_seconds": t.ranking_seconds, "total_seconds": t.total_seconds})
    mnet = [r for r in rows if r["protocol"] == Protocol.MNET.value]
    feat = [r for r in rows if r["protocol"] == Protocol.FEATURE_EUCLIDEAN.value]
    a, b, r2 = linear_fit_r2([r["n_gallery"] for r in mnet], [r["similarity_seconds"] for r in mnet])
    enc_params = model.encoder.parameter_count()
    mnet_params = model.mnet.parameter_count()
    result = {
        "rows": rows,
        "mnet_similarity_fit": {"intercept": a, "slope": b, "r2": r2},
        "total_ratio_at_largest": mnet[-1]["total_seconds"] / feat[-1]["total_seconds"],
        "largest_gallery": mnet[-1]["n_gallery"],
        "encoder_parameters": enc_params,
        "mnet_parameters": mnet_params,
        "parameter_ratio": mnet_params / enc_params,
    }
    if out_dir:
        out = Path(out_dir)
        reporting.write_tsv(out / "bench.tsv", rows)
        reporting.write_json(out / "bench.json", result)
        reporting.write_text(out / "bench_table.txt", bench_text(result))
        reporting.plot_scaling(
            [r["n_gallery"] for r in mnet],
            {"mnet similarity": [r["similarity_seconds"] for r in mnet],
             "feature similarity": [r["similarity_seconds"] for r in feat]},
            out / "bench_scaling.png", fit={"mnet similarity": (a, b, r2)})
    return result


def bench_text(result: dict) -> str:
    fit = result["mnet_similarity_fit"]
    lines = [reporting.aligned_table(result["rows"], ["protocol", "n_probe", "n_gallery",
                                                      "similarity_seconds", "ranking_seconds",
                                                      "total_seconds"]),
             f"mnet similarity vs gallery size: slope {fit['slope']:.3e} s/row, R^2 {fit['r2']:.4f}",
             f"mnet / feature total time at N_g={result['largest_gallery']}: "
             f"{result['total_ratio_at_largest']:.2f}x",
             f"parameters: metric net {result['mnet_parameters']}, encoder "
             f"{result['encoder_parameters']}, ratio {100 * result['parameter_ratio']:.1f}%"]
    return "\n".join(lines) + "\n"


def history_table(state: TrainState) -> list[dict]:
    return _history_rows(state)


__all__ = ["Splits", "build_splits", "generate", "train_model", "evaluate_model", "eval_protocols",
           "run_ablation", "run_configuration", "run_diagnose", "run_bench", "bench_text",
           "first_batch_ids", "summarize", "parse_sweep", "EVAL_COLUMNS", "LOG_COLUMNS"]
