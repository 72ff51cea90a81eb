"""Command line: ``trajflow gen-data | train-teacher | sample | distill | evaluate | plot``."""
from __future__ import annotations

import functools
import json
import os
from pathlib import Path

import click
import torch

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import dump_config, load_config, run_hash
from .core import ConfigurationError, SceneValidationError, derive_seed
from .dataio import (DatasetManifest, SceneFileError, SyntheticConfig, fit_normalizer,
                     generate_synthetic, write_scenes)
from .estimators import FlowForecaster, IMLEForecaster, load_forecaster
from .metrics import EvalReport, default_horizons, evaluate, horizons_from_seconds
from .sampler import SamplingError, read_sample_dump, write_sample_dump
from .student import DatasetError
from .teacher import TrainingError

ENV_OUT = "MOFLOW_OUT"
SPLITS = ("train", "val", "test")
# fields that must agree between a checkpoint and the live configuration
ARCH_FIELDS = ("K", "d_model", "d_ff", "n_heads", "n_enc_layers", "n_dec_blocks")

_EXPECTED = (ConfigurationError, SceneValidationError, SceneFileError, CheckpointError,
             DatasetError, SamplingError, TrainingError, FileNotFoundError, KeyError, ValueError)


class Run:
    """Resolved configuration plus the run directory it writes into."""

    def __init__(self, config_path, overrides, out, run_name, workers):
        self.cfg = load_config(config_path, overrides)
        out = out or os.environ.get(ENV_OUT) or self.cfg["out_dir"]
        self.dir = Path(out) / (run_name or self.cfg["run_name"])
        if workers < 1:
            raise ConfigurationError("--workers must be >= 1")
        torch.set_num_threads(workers)

    def path(self, name: str) -> Path:
        return self.dir / name

    def prepare(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path("config.json").write_text(dump_config(self.cfg))

    def manifest(self) -> DatasetManifest:
        return DatasetManifest.load(self.cfg["manifest"] or self.path("manifest.json"))

    @property
    def seed(self) -> int:
        return self.cfg["seed"]


def command(fn):
    """Shared options and error reporting for every subcommand."""
    @click.option("--config", "config_path", type=click.Path(dir_okay=False),
                  help="JSON run configuration.")
    @click.option("--set", "overrides", multiple=True, metavar="KEY.PATH=VALUE",
                  help="Override one configuration value; repeatable.")
    @click.option("--out", default=None, help=f"Output root (default: ${ENV_OUT} or out_dir).")
    @click.option("--run-name", default=None, help="Run directory name under the output root.")
    @click.option("--workers", default=1, show_default=True, help="CPU threads for torch.")
    @functools.wraps(fn)
    def wrapper(config_path, overrides, out, run_name, workers, **kwargs):
        try:
            run = Run(config_path, overrides, out, run_name, workers)
            return fn(run, **kwargs)
        except _EXPECTED as exc:
            msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
            raise click.ClickException(str(msg)) from exc
    return wrapper


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Multi-agent trajectory forecasting with a K-shot flow teacher and a one-step student."""


@main.command("gen-data")
@command
def gen_data(run: Run):
    """Write seeded synthetic train/val/test splits and their manifest."""
    d = run.cfg["data"]
    run.prepare()
    (run.dir / "data").mkdir(exist_ok=True)
    base = {k: v for k, v in d.items() if k not in ("name", "n_train", "n_val", "n_test")}
    splits, train = {}, None
    for split in SPLITS:
        cfg = SyntheticConfig(**base, seed=derive_seed(run.seed, f"data-{split}"))
        scenes = generate_synthetic(cfg, d[f"n_{split}"])
        rel = f"data/{split}.jsonl"
        write_scenes(scenes, run.path(rel))
        splits[split] = rel
        if split == "train":
            train = scenes
    manifest = DatasetManifest(d["name"], d["T_p"], d["T_f"], d["dt"], [d["agent_type"]], splits,
                               fit_normalizer(train), root=run.dir)
    manifest.save(run.path("manifest.json"))
    click.echo(f"wrote {sum(d[f'n_{s}'] for s in SPLITS)} scenes to {run.dir}")


def _logger(path: Path):
    path.write_text("")

    def log(record: dict) -> None:
        with open(path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return log


def _checkpointer(run: Run, est, name: str, every: int, total: int):
    h = run_hash(run.cfg)

    def save(step: int) -> None:
        done = step + 1
        if done % every == 0 or done == total:
            save_checkpoint(est.to_checkpoint({"step": done, "run_config_hash": h}), run.path(name))
    return save


@main.command("train-teacher")
@command
def train_teacher(run: Run):
    """Train the flow-matching teacher on the manifest's train split."""
    manifest = run.manifest()
    run.prepare()
    net, tr = run.cfg["network"], run.cfg["train"]
    est = FlowForecaster(n_predictions=net["K"], **{k: v for k, v in net.items() if k != "K"},
                         mask=tr["mask"], mu_t=tr["mu_t"], sigma_t=tr["sigma_t"],
                         batch_size=tr["batch_size"], learning_rate=tr["learning_rate"],
                         weight_decay=tr["weight_decay"], max_steps=tr["max_steps"],
                         agent_types=manifest.agent_types, normalizer=manifest.normalizer,
                         seed=run.seed)
    est.fit(manifest.load_split("train"), log=_logger(run.path("train_log.jsonl")),
            callback=_checkpointer(run, est, "teacher.ckpt", tr["checkpoint_every"],
                                   tr["max_steps"]))
    click.echo(f"teacher: final loss {est.history_[-1]['loss']:.4f} -> {run.path('teacher.ckpt')}")


def _check_architecture(ckpt: Checkpoint, run: Run, manifest: DatasetManifest) -> None:
    live = {**run.cfg["network"], "T_p": manifest.T_p, "T_f": manifest.T_f,
            "n_agent_types": len(manifest.agent_types)}
    diffs = [f"{k}: checkpoint {getattr(ckpt.network, k)!r} vs config {live[k]!r}"
             for k in ARCH_FIELDS + ("T_p", "T_f", "n_agent_types")
             if getattr(ckpt.network, k) != live[k]]
    if list(ckpt.agent_types) != list(manifest.agent_types):
        diffs.append(f"agent_types: checkpoint {ckpt.agent_types} vs manifest "
                     f"{manifest.agent_types}")
    if diffs:
        raise ConfigurationError("checkpoint does not match the configuration:\n  "
                                 + "\n  ".join(diffs))


def _load_estimator(run: Run, path: Path, manifest: DatasetManifest, kind: str | None = None):
    ckpt = load_checkpoint(path)
    if kind is not None and ckpt.kind != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {ckpt.kind}")
    _check_architecture(ckpt, run, manifest)
    s = run.cfg["sampler"]
    params = dict(predict_batch_size=s["batch_size"], seed=run.seed)
    if ckpt.kind == "teacher":
        params.update(sampling_steps=s["T"], time_power=s["p"], continuous_time_map=s["continuous"])
    return load_forecaster(ckpt, **params)


def _horizons(run: Run, manifest: DatasetManifest) -> list[int]:
    seconds = run.cfg["evaluate"]["horizons_s"]
    if seconds is None:
        return default_horizons(manifest.T_f)
    horizons = horizons_from_seconds(seconds, manifest.dt, manifest.T_f)
    if not horizons:
        raise ConfigurationError(f"no horizon in {seconds} fits T_f={manifest.T_f} at "
                                 f"dt={manifest.dt}")
    return horizons


def _report(run: Run, est, scenes, manifest) -> tuple[EvalReport, list]:
    captured = []

    def predict(batch):
        preds, probs = est.sample(batch)
        captured.extend(zip(preds, probs))
        return preds, est.nfe_per_sample

    report = evaluate(predict, scenes, _horizons(run, manifest))
    run.path("report.json").write_text(report.to_json(timing=False))
    run.path("report.txt").write_text(report.table())
    run.path("timing.json").write_text(json.dumps(
        {"wallclock_ms_per_scene": report.wallclock_ms_per_scene, "nfe": report.nfe,
         "n_scenes": report.n_scenes}, indent=2, sort_keys=True) + "\n")
    return report, captured


@main.command("sample")
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
              help="Teacher checkpoint (default: <run>/teacher.ckpt).")
@click.option("--split", default=None, help="Split to sample (default: sampler.split).")
@command
def sample_cmd(run: Run, checkpoint, split):
    """ODE-sample the teacher on a split; write samples.jsonl and report.json."""
    manifest = run.manifest()
    est = _load_estimator(run, Path(checkpoint or run.path("teacher.ckpt")), manifest, "teacher")
    run.prepare()
    scenes = manifest.load_split(split or run.cfg["sampler"]["split"])
    report, captured = _report(run, est, scenes, manifest)
    write_sample_dump([{"scene_id": s.scene_id, "predictions": p, "probs": q}
                       for s, (p, q) in zip(scenes, captured)], run.path("samples.jsonl"))
    click.echo(report.table(), nl=False)


@main.command("distill")
@click.option("--samples", type=click.Path(dir_okay=False), default=None,
              help="Teacher sample dump of the train split (default: <run>/samples.jsonl).")
@click.option("--teacher", type=click.Path(dir_okay=False), default=None,
              help="Teacher checkpoint for distill.warm_start (default: <run>/teacher.ckpt).")
@command
def distill(run: Run, samples, teacher):
    """Train the one-step student against cached teacher samples."""
    manifest = run.manifest()
    dump = {r["scene_id"]: r["predictions"]
            for r in read_sample_dump(samples or run.path("samples.jsonl"))}
    net, ds = run.cfg["network"], run.cfg["distill"]
    warm = None
    if ds["warm_start"]:
        warm = load_checkpoint(teacher or run.path("teacher.ckpt"))
        _check_architecture(warm, run, manifest)
    run.prepare()
    est = IMLEForecaster(n_predictions=net["K"],
                         **{k: v for k, v in net.items() if k not in ("K", "mask_k", "mask_m")},
                         m=ds["m"], batch_size=ds["batch_size"], learning_rate=ds["learning_rate"],
                         weight_decay=ds["weight_decay"], max_steps=ds["max_steps"],
                         warm_start=warm, agent_types=manifest.agent_types,
                         normalizer=manifest.normalizer, seed=run.seed)
    scenes = manifest.load_split("train")
    log = _logger(run.path("distill_log.jsonl"))
    est.fit(scenes, dump, log=log,
            callback=_checkpointer(run, est, "student.ckpt", ds["checkpoint_every"],
                                   ds["max_steps"]))
    final = est.chamfer_to(scenes, dump)
    log({"initial_chamfer": est.initial_chamfer_, "final_chamfer": final})
    click.echo(f"student: chamfer {est.initial_chamfer_:.4f} -> {final:.4f} "
               f"-> {run.path('student.ckpt')}")


@main.command("evaluate")
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
              help="Checkpoint to score (default: <run>/student.ckpt if present, else teacher).")
@click.option("--split", default=None, help="Split to score (default: evaluate.split).")
@command
def evaluate_cmd(run: Run, checkpoint, split):
    """Score a teacher (ODE) or student (one step) checkpoint; write report.json and report.txt."""
    manifest = run.manifest()
    if checkpoint is None:
        checkpoint = run.path("student.ckpt")
        if not checkpoint.exists():
            checkpoint = run.path("teacher.ckpt")
    est = _load_estimator(run, Path(checkpoint), manifest)
    run.prepare()
    report, _ = _report(run, est, manifest.load_split(split or run.cfg["evaluate"]["split"]),
                        manifest)
    click.echo(report.table(), nl=False)


@main.command("plot")
@click.option("--samples", type=click.Path(dir_okay=False), default=None,
              help="Sample dump (default: <run>/samples.jsonl).")
@click.option("--split", default=None, help="Split the dump was drawn from (default: sampler.split).")
@click.option("--scene-ids", default=None, help="Comma-separated scene ids (default: first four).")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None,
              help="Directory for the SVG files (default: <run>/plots).")
@command
def plot(run: Run, samples, split, scene_ids, out_dir):
    """Render past, predicted and ground-truth trajectories per scene as SVG."""
    from .plotting import plot_scene

    manifest = run.manifest()
    records = {r["scene_id"]: r for r in read_sample_dump(samples or run.path("samples.jsonl"))}
    scenes = {s.scene_id: s for s in manifest.load_split(split or run.cfg["sampler"]["split"])}
    ids = scene_ids.split(",") if scene_ids else list(records)[:4]
    missing = [i for i in ids if i not in records or i not in scenes]
    if missing:
        raise click.ClickException(f"unknown scene id(s): {', '.join(missing)}")
    target = Path(out_dir) if out_dir else run.path("plots")
    target.mkdir(parents=True, exist_ok=True)
    for sid in ids:
        path = target / f"{sid}.svg"
        plot_scene(scenes[sid], records[sid]["predictions"], path)
        click.echo(str(path))


if __name__ == "__main__":
    main()
