"""Command-line shell binding all modules into reproducible experiments.

Every command writes only under its run/output directory and exits 0 on
success. Failure classes get distinct exit codes so scripts can branch:
2 malformed config, 3 missing checkpoint, 4 config-hash mismatch,
1 anything else. Errors print one machine-parsable line on stderr.

Environment: CDGAN_OUTPUT_ROOT prefixes relative output directories;
CDGAN_THREADS caps torch CPU threads.
"""

from __future__ import annotations

import json
import os
import sys
import time
from pathlib import Path

import click
import numpy as np
import torch

from . import evaluation as ev
from . import sampler as smp
from . import trainer as tr
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config, save_config
from .data import ingest_dataset
from .nets import build_models

EXIT_CONFIG = 2
EXIT_MISSING_CHECKPOINT = 3
EXIT_HASH_MISMATCH = 4


class CliError(click.ClickException):
    def __init__(self, message, exit_code=1):
        super().__init__(message)
        self.exit_code = exit_code

    def show(self, file=None):
        print(f"error: {self.message}", file=sys.stderr)


def _setup_threads():
    cap = os.environ.get("CDGAN_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


def _resolve_out(path) -> Path:
    p = Path(path)
    root = os.environ.get("CDGAN_OUTPUT_ROOT")
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _load_cfg(path) -> ExperimentConfig:
    try:
        return load_config(path)
    except ConfigError as exc:
        raise CliError(f"config: {exc}", EXIT_CONFIG)


def _load_ckpt(path, cfg: ExperimentConfig, check_hash=True):
    p = Path(path)
    if not p.exists():
        raise CliError(f"checkpoint: not found: {p}", EXIT_MISSING_CHECKPOINT)
    models = build_models(cfg.arch)
    try:
        meta = load_checkpoint(p, models)
    except CheckpointError as exc:
        raise CliError(f"checkpoint: {exc}", EXIT_MISSING_CHECKPOINT)
    if check_hash and meta.get("config_hash") not in (None, cfg.hash()):
        raise CliError(
            f"checkpoint: config hash mismatch ({meta.get('config_hash')} vs "
            f"{cfg.hash()})", EXIT_HASH_MISMATCH)
    models.eval()
    return models, meta


class _RunLock:
    """One writer per run directory."""

    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(f"run directory is locked by another writer: {self.path}")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _write_manifest(run_dir: Path, cfg: ExperimentConfig, started: float,
                    artifacts: list[str]):
    manifest = {
        "config_hash": cfg.hash(),
        "code_version": _code_version(),
        "started": started,
        "ended": time.time(),
        "artifacts": sorted(artifacts),
    }
    tmp = run_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(run_dir / "manifest.json")


def _code_version() -> str:
    from importlib.metadata import version, PackageNotFoundError
    try:
        return version("cdgan")
    except PackageNotFoundError:
        return "unknown"


def _save_images(path, images: torch.Tensor, labels=None):
    arrays = {"images": images.detach().numpy().astype(np.float32)}
    if labels is not None:
        arrays["labels"] = np.asarray(labels)
    np.savez(path, **arrays)


def _load_images(path) -> torch.Tensor:
    p = Path(path)
    if not p.exists():
        raise CliError(f"image archive not found: {p}")
    with np.load(p) as archive:
        return torch.as_tensor(archive["images"].astype(np.float32))


def _backend(cfg: ExperimentConfig) -> ev.RandomConvBackend:
    return ev.RandomConvBackend(seed=cfg.seed, channels=cfg.arch.channels)


@click.group()
def main():
    """Desk-scale contrastive-discriminator GAN experiments."""
    _setup_threads()


@main.command()
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("-o", "--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Override every config seed.")
@click.option("--steps", type=int, default=None, help="Override generator step count.")
@click.option("--batch-size", type=int, default=None)
def train(config_path, out_dir, seed, steps, batch_size):
    """Train a model; writes checkpoints, a CSV step log, and a manifest."""
    cfg = _load_cfg(config_path)
    train_d = cfg.to_dict()["train"]
    if seed is not None:
        train_d["seed"] = seed
    if steps is not None:
        train_d["total_generator_steps"] = steps
    if batch_size is not None:
        train_d["batch_size"] = batch_size
    d = cfg.to_dict()
    d["train"] = train_d
    if seed is not None:
        d["seed"] = seed
        d["dataset"] = dict(d["dataset"], seed=seed)
    try:
        cfg = ExperimentConfig.from_dict(d)
    except ConfigError as exc:
        raise CliError(f"config: {exc}", EXIT_CONFIG)

    run_dir = _resolve_out(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    with _RunLock(run_dir):
        save_config(cfg, run_dir / "config.yaml")
        dataset = ingest_dataset(cfg.dataset)
        state = tr.TrainState.create(cfg.arch, cfg.optim, cfg.train,
                                     aug_spec=cfg.augmentation_spec())
        ckpt_path = run_dir / "checkpoint.npz"

        def checkpoint_fn(st):
            save_checkpoint(ckpt_path, st.models, st.generator_steps, cfg.hash(),
                            rng_state=st.rng.state_dict())

        try:
            tr.train(state, dataset.train_images, log_path=run_dir / "steps.csv",
                     checkpoint_fn=checkpoint_fn)
        except tr.TrainingDiverged as exc:
            raise CliError(f"training diverged: {exc}")
        artifacts = ["config.yaml", "checkpoint.npz", "steps.csv"]
        _write_manifest(run_dir, cfg, started, artifacts)
    click.echo(f"trained {state.generator_steps} generator steps -> {run_dir}")


@main.command()
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("--checkpoint", "ckpt", required=True, type=click.Path())
@click.option("-n", "--n-samples", default=64, type=int)
@click.option("-o", "--out", "out_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=0)
def sample(config_path, ckpt, n_samples, out_path, seed):
    """Plain prior samples from a checkpointed generator."""
    cfg = _load_cfg(config_path)
    models, _ = _load_ckpt(ckpt, cfg)
    rng = np.random.default_rng(seed)
    z = torch.as_tensor(rng.standard_normal((n_samples, cfg.arch.latent_dim)),
                        dtype=models.config.torch_dtype)
    with torch.no_grad():
        images = models.generator(z)
    out = _resolve_out(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    _save_images(out, images)
    click.echo(f"wrote {n_samples} samples -> {out}")


@main.command()
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("--checkpoint", "ckpt", required=True, type=click.Path())
@click.option("-n", "--n-samples", default=64, type=int)
@click.option("-o", "--out", "out_path", required=True, type=click.Path())
@click.option("--condition-weights", type=click.Path(), default=None,
              help="npz with a 'weights' (n_classes, d_e) array from lineval.")
@click.option("--class-index", type=int, default=None)
@click.option("--cond-lambda", type=float, default=1.0)
@click.option("--steps", type=int, default=1000)
@click.option("--epsilon", type=float, default=0.1)
@click.option("--noise-std", type=float, default=0.1)
@click.option("--aux-noise/--no-aux-noise", default=False)
@click.option("--trajectory-log", type=click.Path(), default=None)
@click.option("--seed", type=int, default=0)
def ddls(config_path, ckpt, n_samples, out_path, condition_weights, class_index,
         cond_lambda, steps, epsilon, noise_std, aux_noise, trajectory_log, seed):
    """Langevin-refined sampling, optionally conditioned on a class vector."""
    cfg = _load_cfg(config_path)
    models, _ = _load_ckpt(ckpt, cfg)
    mode = "unconditional"
    vector = None
    if condition_weights is not None:
        if class_index is None:
            raise CliError("ddls: --class-index required with --condition-weights")
        p = Path(condition_weights)
        if not p.exists():
            raise CliError(f"ddls: weight file not found: {p}")
        with np.load(p) as archive:
            weights = archive["weights"]
        if not (0 <= class_index < weights.shape[0]):
            raise CliError(f"ddls: class index {class_index} out of range")
        vector = tuple(float(x) for x in weights[class_index])
        mode = "conditional"
    energy_cfg = smp.EnergyConfig(
        mode=mode, condition_vector=vector, cond_lambda=cond_lambda,
        epsilon=epsilon, n_steps=steps, noise_std=noise_std, aux_noise=aux_noise)
    rng = np.random.default_rng(seed)
    record_every = 0 if trajectory_log is None else max(1, steps // 100)
    try:
        images, trajectory = smp.run_cddls(models, energy_cfg, n_samples, rng,
                                           record_every=record_every)
    except smp.ChainDiverged as exc:
        raise CliError(f"ddls: {exc}")
    out = _resolve_out(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    _save_images(out, images)
    if trajectory_log is not None:
        traj = np.stack([t.numpy() for t in trajectory]) if trajectory else np.empty(0)
        np.savez(_resolve_out(trajectory_log), trajectory=traj)
    click.echo(f"wrote {n_samples} refined samples -> {out}")


@main.command()
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("--checkpoint", "ckpt", required=True, type=click.Path())
@click.option("-o", "--out", "out_dir", required=True, type=click.Path())
@click.option("--epochs", type=int, default=100)
def lineval(config_path, ckpt, out_dir, epochs):
    """Linear evaluation of the frozen encoder; also writes the class
    weight matrix for conditional sampling."""
    cfg = _load_cfg(config_path)
    models, _ = _load_ckpt(ckpt, cfg)
    dataset = ingest_dataset(cfg.dataset)
    backend = ev.EncoderBackend(models.encoder, f"encoder/{cfg.hash()}")
    feats_tr = backend.features(dataset.train_images)
    feats_te = backend.features(dataset.test_images)
    result = ev.linear_eval(feats_tr, dataset.train_labels, feats_te,
                            dataset.test_labels, epochs=epochs, seed=cfg.seed)
    weights = ev.linear_eval_weights(feats_tr, dataset.train_labels,
                                     epochs=epochs, seed=cfg.seed)
    out = _resolve_out(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "lineval_weights.npz", weights=weights)
    ev.write_metric_records(out / "metrics.jsonl", [ev.MetricRecord(
        "linear_eval_accuracy", backend.identity, result.accuracy,
        result.n_test, cfg.seed)])
    click.echo(f"linear eval accuracy: {result.accuracy:.4f}")


@main.command()
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("--generated", required=True, type=click.Path())
@click.option("--reference", required=True,
              help="'test', 'train', or a path to an image archive.")
@click.option("-o", "--out", "out_path", type=click.Path(), default=None)
def fid(config_path, generated, reference, out_path):
    """Proxy Frechet distance between two image sets under the fixed
    random-feature backend."""
    cfg = _load_cfg(config_path)
    backend = _backend(cfg)
    gen = _load_images(generated)
    if reference in ("test", "train"):
        dataset = ingest_dataset(cfg.dataset)
        ref = dataset.test_images if reference == "test" else dataset.train_images
    else:
        ref = _load_images(reference)
    value = ev.frechet_distance(
        ev.gaussian_stats(backend.features(gen)),
        ev.gaussian_stats(backend.features(ref)))
    record = ev.MetricRecord("proxy_fid", backend.identity, value,
                             gen.shape[0], cfg.seed)
    if out_path:
        ev.write_metric_records(_resolve_out(out_path), [record])
    click.echo(f"proxy_fid: {value:.6f}")


@main.command()
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("--generated", required=True, type=click.Path(),
              help="Image archive; with labels, per-class subsets are used.")
@click.option("--reference", default="test", help="'test' or 'train' split.")
@click.option("-o", "--out", "out_path", type=click.Path(), default=None)
def classfid(config_path, generated, reference, out_path):
    """Class-wise proxy Frechet distances against per-class dataset subsets."""
    cfg = _load_cfg(config_path)
    backend = _backend(cfg)
    dataset = ingest_dataset(cfg.dataset)
    refs = dataset.by_class("test" if reference == "test" else "train")
    p = Path(generated)
    if not p.exists():
        raise CliError(f"image archive not found: {p}")
    with np.load(p) as archive:
        gen_images = torch.as_tensor(archive["images"].astype(np.float32))
        gen_labels = archive["labels"] if "labels" in archive else None
    if gen_labels is not None:
        gen = {int(c): gen_images[torch.as_tensor(np.flatnonzero(gen_labels == c))]
               for c in np.unique(gen_labels)}
    else:
        gen = gen_images
    per_class, mean = ev.class_wise_fid(gen, refs, backend)
    if out_path:
        out = _resolve_out(out_path)
        with open(out, "w") as fh:
            cols = [str(c) for c in sorted(per_class)] + ["mean"]
            fh.write(",".join(cols) + "\n")
            vals = [f"{per_class[c]:.6f}" for c in sorted(per_class)] + [f"{mean:.6f}"]
            fh.write(",".join(vals) + "\n")
    for c in sorted(per_class):
        click.echo(f"class {c}: {per_class[c]:.4f}")
    click.echo(f"mean: {mean:.4f}")


@main.command("sweep-batch")
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("-o", "--out", "out_dir", required=True, type=click.Path())
@click.option("--sizes", required=True, help="Comma-separated batch sizes.")
@click.pass_context
def sweep_batch(ctx, config_path, out_dir, sizes):
    """Run the same config across a batch-size grid; emits a merged
    comparison CSV of final losses and proxy FID."""
    cfg = _load_cfg(config_path)
    out = _resolve_out(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for size in [int(s) for s in sizes.split(",")]:
        sub = out / f"bs{size}"
        ctx.invoke(train, config_path=config_path, out_dir=str(sub),
                   seed=None, steps=None, batch_size=size)
        sub_cfg = _load_cfg(sub / "config.yaml")
        models, meta = _load_ckpt(sub / "checkpoint.npz", sub_cfg)
        dataset = ingest_dataset(sub_cfg.dataset)
        backend = _backend(sub_cfg)
        rng = np.random.default_rng(sub_cfg.seed)
        n_eval = min(sub_cfg.eval_samples, dataset.test_images.shape[0])
        z = torch.as_tensor(rng.standard_normal((n_eval, sub_cfg.arch.latent_dim)),
                            dtype=models.config.torch_dtype)
        with torch.no_grad():
            gen = models.generator(z)
        value = ev.frechet_distance(
            ev.gaussian_stats(backend.features(gen)),
            ev.gaussian_stats(backend.features(dataset.test_images[:n_eval])))
        rows.append((size, meta["step"], value))
    with open(out / "sweep.csv", "w") as fh:
        fh.write("batch_size,steps,proxy_fid\n")
        for size, step, value in rows:
            fh.write(f"{size},{step},{value:.6f}\n")
    click.echo(f"sweep written -> {out / 'sweep.csv'}")


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path())
@click.option("-o", "--out", "out_path", type=click.Path(), default=None)
def plot(run_dir, out_path):
    """Render loss curves from a run's CSV step log to a static PNG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(run_dir)
    csv_path = run / "steps.csv"
    if not csv_path.exists():
        raise CliError(f"plot: no step log at {csv_path}")
    rows = np.genfromtxt(csv_path, delimiter=",", names=True)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("lcon_plus", "lcon_minus", "ldis", "ld"):
        axes[0].plot(rows["step"], rows[key], label=key)
    axes[0].set_xlabel("generator step"), axes[0].legend(), axes[0].set_title("discriminator side")
    axes[1].plot(rows["step"], rows["lg"], label="lg")
    axes[1].plot(rows["step"], rows["lr"], label="lr")
    axes[1].set_xlabel("generator step"), axes[1].legend(), axes[1].set_title("generator side")
    fig.tight_layout()
    target = Path(out_path) if out_path else run / "losses.png"
    fig.savefig(target, dpi=120)
    click.echo(f"plot -> {target}")


if __name__ == "__main__":
    main()
