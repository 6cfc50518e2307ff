"""Training harness: loss composition, Adam with warmup + exponential decay,
deterministic single-threaded runs, checkpoint round trips, evaluation.

RNG discipline: parameter init uses default_rng((seed, 0)), the step stream
(batch indices, slot noise) uses default_rng((seed, 1)), and evaluation noise
is derived per sample from a fixed eval seed. Resume restores the step
stream's exact bit-generator state, so an interrupted run continues
bit-identically.
"""

import dataclasses
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as md
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, NumericError
from .metrics import hungarian, segmentation_scores

CHECKPOINT_VERSION = 1

_counter_lock = threading.Lock()
counters = {"point_loss_skipped": 0, "train_samples_seen": 0, "train_annotated_seen": 0,
            "eval_no_foreground_skipped": 0}


def reset_counters():
    with _counter_lock:
        for key in counters:
            counters[key] = 0


def _bump(key, amount=1):
    with _counter_lock:
        counters[key] += amount


@dataclass(frozen=True)
class LossConfig:
    recon_weight: float = 1.0
    point_weight: float = 0.1
    point_loss_iterations: str = "final"  # or "all"

    def __post_init__(self):
        if self.recon_weight < 0 or self.point_weight < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.point_loss_iterations not in ("final", "all"):
            raise ConfigError(
                f"point_loss_iterations must be 'final' or 'all', got {self.point_loss_iterations!r}")


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 4e-4
    warmup_steps: int = 1000
    decay_half_life: int = 20000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.base_lr <= 0 or self.decay_half_life <= 0:
            raise ConfigError("base_lr and decay_half_life must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be nonnegative")


# ------------------------------------------------------------------ losses

def point_loss(predicted_points: Tensor, gt_points: np.ndarray) -> Tensor:
    """Mean squared distance between gt points and their matched predictions.

    Matching is a min-cost assignment on squared distances; the chosen pairs
    enter the loss through a constant selection matrix, so gradients flow into
    the selected predictions only. No annotated points: returns zero and bumps
    counters["point_loss_skipped"].
    """
    K = predicted_points.data.shape[0]
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    m = gt.shape[0]
    if m == 0:
        _bump("point_loss_skipped")
        return Tensor(np.zeros(()), dtype=predicted_points.data.dtype)
    if m > K:
        raise ConfigError(f"{m} annotated points cannot match into K={K} slots")
    diff = predicted_points.data[:, None, :] - gt[None, :, :]
    pairs = hungarian((diff ** 2).sum(axis=2))
    select = np.zeros((m, K))
    targets = np.zeros((m, 2))
    for row, (slot_i, point_j) in enumerate(pairs):
        select[row, slot_i] = 1.0
        targets[row] = gt[point_j]
    dtype = predicted_points.data.dtype
    matched = ad.matmul(Tensor(select, dtype=dtype), predicted_points)  # m x 2
    err = matched - Tensor(targets, dtype=dtype)
    return ad.scale(ad.reduce_sum(ad.mul(err, err)), 1.0 / m)


def total_loss(image: Tensor, result: md.ForwardResult, annotations,
               loss_config: LossConfig) -> tuple:
    """(scalar loss tensor, components dict). Point term only when annotated."""
    HW = result.decoder.reconstruction.data.shape[0]
    target = ad.reshape(image, (HW, 3))
    diff = result.decoder.reconstruction - target
    recon = ad.reduce_mean(ad.mul(diff, diff))
    loss = ad.scale(recon, loss_config.recon_weight)
    components = {"recon": float(recon.data), "point": 0.0}
    if annotations is not None and result.points:
        gt = md._annotated_points(annotations)
        if loss_config.point_loss_iterations == "final":
            pl = point_loss(result.points[-1], gt)
        else:
            terms = [point_loss(p, gt) for p in result.points]
            acc = terms[0]
            for t in terms[1:]:
                acc = acc + t
            pl = ad.scale(acc, 1.0 / len(terms))
        components["point"] = float(pl.data)
        loss = loss + ad.scale(pl, loss_config.point_weight)
    components["total"] = float(loss.data)
    return loss, components


# ------------------------------------------------------------------- adam

class Adam:
    """Adam with linear warmup and exponential half-life decay."""

    def __init__(self, params: dict, config: OptimizerConfig = None):
        self.config = config or OptimizerConfig()
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.step_count = 0

    def lr_at(self, step: int) -> float:
        c = self.config
        warm = min(step / c.warmup_steps, 1.0) if c.warmup_steps > 0 else 1.0
        return c.base_lr * warm * 0.5 ** (step / c.decay_half_life)

    def apply(self, params: dict, grads: dict) -> float:
        """One update over name-keyed gradients; returns the lr used."""
        c = self.config
        self.step_count += 1
        t = self.step_count
        lr = self.lr_at(t)
        for name, p in params.items():
            g = grads[name]
            self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            m_hat = self.m[name] / (1.0 - c.beta1 ** t)
            v_hat = self.v[name] / (1.0 - c.beta2 ** t)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + c.eps)).astype(p.data.dtype)
        return lr


# -------------------------------------------------------------- train step

def _sample_annotations(sample):
    if not sample.annotated:
        return None
    return {"points": sample.gt_points, "indices": sample.annotated_object_indices}


def train_step(params: dict, config: md.ModelConfig, loss_config: LossConfig,
               batch: list, adam: Adam, rng) -> dict:
    """Forward/backward over one batch, one Adam update, one log record.

    Aborts with NumericError (diagnostic dump: step, components, param norm)
    on a non-finite loss instead of silently corrupting the parameters.
    """
    if not batch:
        raise ConfigError("empty batch")
    per_sample = []
    with ad.Tape() as tape:
        acc = None
        for sample in batch:
            noise = rng.standard_normal((config.K, config.D_slot))
            image = Tensor(sample.image)
            annotations = _sample_annotations(sample)
            _bump("train_samples_seen")
            if annotations is not None:
                _bump("train_annotated_seen")
            result = md.slash_forward(image, params, config, noise,
                                      mode="train", annotations=annotations)
            loss, components = total_loss(image, result, annotations, loss_config)
            per_sample.append(components)
            acc = loss if acc is None else acc + loss
        batch_loss = ad.scale(acc, 1.0 / len(batch))

    if not np.isfinite(batch_loss.data):
        norm = float(np.sqrt(sum(float((p.data.astype(np.float64) ** 2).sum())
                                 for p in params.values())))
        raise NumericError(
            f"non-finite loss at step {adam.step_count + 1}: "
            f"components={per_sample} param_norm={norm}")

    grads = tape.backward(batch_loss)
    # params outside this batch's graph (e.g. point-init MLP when nothing was
    # annotated) simply get zero gradient
    named = {name: grads.get(p, np.zeros_like(p.data)) for name, p in params.items()}
    lr = adam.apply(params, named)
    n = len(batch)
    return {"step": adam.step_count, "lr": lr, "loss": float(batch_loss.data),
            "recon": sum(c["recon"] for c in per_sample) / n,
            "point": sum(c["point"] for c in per_sample) / n}


# -------------------------------------------------------------- evaluation

def evaluate(params: dict, config: md.ModelConfig, samples: list,
             noise_seed=9000, max_samples: int = None) -> dict:
    """Mean segmentation metrics over a sample list, inference mode only.

    Ground-truth points are never passed to the model here; slash_forward
    enforces that by rejecting annotations at eval. Samples with no foreground
    are skipped for fg_ari (counted).
    """
    if max_samples is not None:
        samples = samples[:max_samples]
    if not samples:
        raise ConfigError("nothing to evaluate")
    sums = {"ari": 0.0, "fg_ari": 0.0, "miou": 0.0}
    fg_count = 0
    for i, sample in enumerate(samples):
        noise = np.random.default_rng((noise_seed, i)).standard_normal(
            (config.K, config.D_slot))
        result = md.slash_forward(Tensor(sample.image), params, config, noise,
                                  mode="eval", annotations=None)
        seg = md.masks_from_model(result, config, source="decoder")
        scores = segmentation_scores(seg, sample.gt_segmentation)
        sums["ari"] += scores["ari"]
        sums["miou"] += scores["miou"]
        if np.isnan(scores["fg_ari"]):
            _bump("eval_no_foreground_skipped")
        else:
            sums["fg_ari"] += scores["fg_ari"]
            fg_count += 1
    n = len(samples)
    return {"ari": sums["ari"] / n,
            "fg_ari": sums["fg_ari"] / fg_count if fg_count else float("nan"),
            "miou": sums["miou"] / n,
            "num_samples": n}


# ------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: dict, adam: Adam, rng,
                    config: md.ModelConfig, loss_config: LossConfig) -> None:
    arrays = {}
    for name, p in params.items():
        arrays[f"param/{name}"] = p.data
        arrays[f"adam_m/{name}"] = adam.m[name]
        arrays[f"adam_v/{name}"] = adam.v[name]
    meta = {"version": CHECKPOINT_VERSION,
            "step": adam.step_count,
            "config": md.config_to_dict(config),
            "loss": dataclasses.asdict(loss_config),
            "opt": dataclasses.asdict(adam.config),
            "rng_state": rng.bit_generator.state}
    arrays["meta"] = np.array(json.dumps(meta))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> dict:
    """Returns {"params", "adam", "rng", "config", "loss", "step"}; bit-exact."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    with np.load(path, allow_pickle=False) as archive:
        try:
            meta = json.loads(str(archive["meta"]))
        except KeyError:
            raise CheckpointError(f"{path} has no meta record") from None
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {meta.get('version')!r} incompatible with "
                f"{CHECKPOINT_VERSION}")
        config = md.config_from_dict(meta["config"])
        loss_config = LossConfig(**meta["loss"])
        params = md.init_params(config, np.random.default_rng(0))
        adam = Adam(params, OptimizerConfig(**meta["opt"]))
        for name, p in params.items():
            key = f"param/{name}"
            if key not in archive:
                raise CheckpointError(f"checkpoint missing tensor {name}")
            p.data = archive[key].copy()
            adam.m[name] = archive[f"adam_m/{name}"].copy()
            adam.v[name] = archive[f"adam_v/{name}"].copy()
    adam.step_count = meta["step"]
    rng = np.random.default_rng(0)
    rng.bit_generator.state = meta["rng_state"]
    return {"params": params, "adam": adam, "rng": rng, "config": config,
            "loss": loss_config, "step": meta["step"]}


# --------------------------------------------------------------- run loop

CSV_HEADER = "step,lr,loss,recon,point,val_ari,val_fg_ari,val_miou"


@dataclass
class RunManifest:
    run_dir: str
    seed: int
    version: str
    config: dict
    steps_completed: int
    metric_rows: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)

    def save(self):
        path = Path(self.run_dir) / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2))


def _csv_row(record: dict) -> str:
    cells = [str(record["step"])]
    for key in ("lr", "loss", "recon", "point"):
        cells.append(repr(float(record[key])) if key in record else "")
    for key in ("val_ari", "val_fg_ari", "val_miou"):
        cells.append(repr(float(record[key])) if key in record else "")
    return ",".join(cells)


def train_run(config: md.ModelConfig, loss_config: LossConfig,
              opt_config: OptimizerConfig, train_samples: list,
              val_samples: list, seed: int, out_dir, steps: int,
              batch_size: int = 16, eval_every: int = 0,
              checkpoint_every: int = 0, eval_samples: int = 100,
              resume=None, log_fn=None) -> RunManifest:
    """One deterministic training run; emits manifest, metrics.csv, checkpoints.

    eval_every / checkpoint_every of 0 mean "only at the end". log_fn (if
    given) receives stable key=value progress lines.
    """
    from . import __version__

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if batch_size < 1 or batch_size > len(train_samples):
        raise ConfigError(
            f"batch_size {batch_size} invalid for {len(train_samples)} samples")

    if resume is not None:
        state = load_checkpoint(resume)
        if md.config_to_dict(state["config"]) != md.config_to_dict(config):
            raise CheckpointError("checkpoint config does not match the requested run")
        params, adam, rng = state["params"], state["adam"], state["rng"]
        loss_config = state["loss"]
        start_step = state["step"]
    else:
        params = md.init_params(config, np.random.default_rng((seed, 0)))
        adam = Adam(params, opt_config)
        rng = np.random.default_rng((seed, 1))
        start_step = 0

    csv_path = out_dir / "metrics.csv"
    mode = "a" if (resume is not None and csv_path.exists()) else "w"
    csv_file = open(csv_path, mode)
    if mode == "w":
        csv_file.write(CSV_HEADER + "\n")

    manifest = RunManifest(run_dir=str(out_dir), seed=seed, version=__version__,
                           config={"model": md.config_to_dict(config),
                                   "loss": dataclasses.asdict(loss_config),
                                   "opt": dataclasses.asdict(adam.config),
                                   "steps": steps, "batch_size": batch_size},
                           steps_completed=start_step)

    def run_eval(step):
        scores = evaluate(params, config, val_samples, max_samples=eval_samples)
        record = {"step": step, "val_ari": scores["ari"],
                  "val_fg_ari": scores["fg_ari"], "val_miou": scores["miou"]}
        csv_file.write(_csv_row(record) + "\n")
        csv_file.flush()
        manifest.metric_rows.append(record)
        manifest.final_metrics = {k: scores[k] for k in ("ari", "fg_ari", "miou")}
        if log_fn:
            log_fn(f"eval step={step} ari={scores['ari']!r} "
                   f"fg_ari={scores['fg_ari']!r} miou={scores['miou']!r}")

    def save_ckpt(step):
        path = out_dir / "checkpoints" / f"step-{step}.npz"
        save_checkpoint(path, params, adam, rng, config, loss_config)
        manifest.checkpoints.append(str(path))

    if start_step == 0:
        run_eval(0)

    try:
        for _ in range(start_step, steps):
            idx = rng.choice(len(train_samples), size=batch_size, replace=False)
            batch = [train_samples[i] for i in idx]
            record = train_step(params, config, loss_config, batch, adam, rng)
            csv_file.write(_csv_row(record) + "\n")
            manifest.steps_completed = record["step"]
            if log_fn:
                log_fn(f"step={record['step']} lr={record['lr']!r} "
                       f"loss={record['loss']!r} recon={record['recon']!r} "
                       f"point={record['point']!r}")
            step = record["step"]
            if eval_every and step % eval_every == 0 and step < steps:
                run_eval(step)
            if checkpoint_every and step % checkpoint_every == 0 and step < steps:
                save_ckpt(step)
        if steps > start_step or steps == 0:
            if steps > 0:
                run_eval(steps)
            save_ckpt(steps)
    finally:
        csv_file.close()
    manifest.save()
    return manifest
