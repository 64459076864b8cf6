"""End-to-end toy training: SGD with the warmup schedule, a triplet
variant plus label-smoothed cross-entropy (equal weighting by default),
an optional cyclic phase with weight-snapshot averaging, and per-epoch
retrieval metrics on a held-out query/gallery split.

The loop is single-threaded and deterministic: a fixed seed reproduces
the metrics trace bit for bit on the same platform.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import backward
from .data import (IdentityDataset, PkEpochSampler, PkSpec, ReaParams,
                   erase_span_1d, gen_synthetic)
from .evaluation import EvalResult, distance_matrix, evaluate_reid
from .losses import (SmoothingConfig, TripletConfig, cross_entropy_smoothed,
                     pairwise_distances, triplet_loss)
from .model import ToyModel, ToyModelConfig
from .schedule import ScheduleState, cyclic_lr, is_snapshot_epoch
from .swag import (SwagPosterior, bma_predict, collect_snapshot,
                   save_posterior, swa_weights)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, lr: float):
        super().__init__(f"loss became non-finite at epoch {epoch} (lr={lr:g})")
        self.epoch = epoch
        self.lr = lr


@dataclass
class RunConfig:
    """Flat, fully echoable configuration; every field doubles as a
    config-file key and a CLI flag."""
    # synthetic dataset
    num_identities: int = 50
    per_identity: int = 20
    dim: int = 32
    intra_sigma: float = 0.5
    spread: float = 5.0
    cam_spread: float = 6.0
    num_cameras: int = 6
    query_fraction: float = 0.25
    # model
    hidden1: int = 64
    hidden2: int = 64
    embed_dim: int = 16
    gem_head: bool = True
    gem_positions: int = 4
    l2_normalize: bool = True
    # loss
    loss_variant: str = "soft-margin"
    margin: float = 0.3
    distance: str = "euclidean"
    smoothing_epsilon: float = 0.1
    triplet_weight: float = 1.0
    ce_weight: float = 1.0
    # optimizer / schedule
    epochs: int = 60
    peak_lr: float = 3e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # batches
    pk_ids: int = 8
    pk_per_id: int = 4
    # feature-span erasing (1-d analog of rectangle erasing)
    rea_prob: float = 0.0
    # cyclic weight-averaging phase
    swag: bool = False
    swag_cycles: int = 4
    swag_cycle_length: int = 5
    swag_base_lr: float = 3e-4
    swag_scale: float = 0.5
    bma_samples: int = 8
    swag_inference: str = "swa"  # or "bma"
    # evaluation
    eval_every: int = 1
    k_max: int = 10
    # bookkeeping
    seed: int = 1
    out_dir: str = ""

    def echo(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)}"
                 for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"


def parse_config_file(path) -> dict:
    """key=value lines; blank lines and # comments ignored."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}: line {lineno}: expected key=value")
            values[key.strip()] = value.strip()
    return values


def config_from_mapping(values: dict) -> RunConfig:
    """Build a RunConfig from string (or typed) values, validating keys."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    kwargs = {}
    for key, raw in values.items():
        if key not in fields:
            raise ValueError(f"unknown config key {key!r}")
        kwargs[key] = _coerce_field(fields[key].type, raw)
    return RunConfig(**kwargs)


def _coerce_field(type_name, raw):
    if not isinstance(raw, str):
        return raw
    if type_name in ("int", int):
        return int(raw)
    if type_name in ("float", float):
        return float(raw)
    if type_name in ("bool", bool):
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean from {raw!r}")
    return raw


def scaled_warmup_lr(t: int, total_epochs: int, peak: float) -> float:
    """The warmup shape with its phase boundaries rescaled from the
    350-epoch reference to ``total_epochs``: ramp to peak, then plateaus
    at peak, peak/10, peak/100."""
    if not 1 <= t <= total_epochs:
        raise ValueError(f"epoch {t} outside [1, {total_epochs}]")
    s = total_epochs / 350.0
    ramp_end = max(1, round(10 * s))
    plateau1_end = max(ramp_end + 1, round(150 * s))
    plateau2_end = max(plateau1_end + 1, round(225 * s))
    if t <= ramp_end:
        return peak * t / ramp_end
    if t <= plateau1_end:
        return peak
    if t <= plateau2_end:
        return peak / 10.0
    return peak / 100.0


class SgdMomentum:
    """Classic momentum SGD; weight decay applies to matrices only."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.values) for name, t in params}

    def step(self, lr: float) -> None:
        for name, t in self.params:
            g = t.grad
            if self.weight_decay and t.values.ndim > 1:
                g = g + self.weight_decay * t.values
            v = self.velocity[name]
            v *= self.momentum
            v -= lr * g
            t.values += v


@dataclass
class TrainResult:
    model: ToyModel
    config: RunConfig
    trace: list[dict]
    baseline: dict               # untrained (epoch-0) metrics
    final: dict
    snapshots: list[dict] = field(default_factory=list)
    posterior: SwagPosterior | None = None
    dataset: IdentityDataset | None = None
    query_index: np.ndarray | None = None
    gallery_index: np.ndarray | None = None


def split_query_gallery(dataset: IdentityDataset, fraction: float,
                        seed) -> tuple[np.ndarray, np.ndarray]:
    """Per identity, ``fraction`` of the rows become queries, the rest
    gallery.  Camera assignments are left as generated so the same-camera
    exclusion rule is exercised."""
    rng = np.random.default_rng(seed)
    query, gallery = [], []
    for identity in np.unique(dataset.ids):
        rows = np.nonzero(dataset.ids == identity)[0]
        rows = rng.permutation(rows)
        n_query = max(1, int(round(fraction * rows.size)))
        query.extend(rows[:n_query])
        gallery.extend(rows[n_query:])
    return np.asarray(sorted(query)), np.asarray(sorted(gallery))


def _evaluate_split(embed_fn, dataset: IdentityDataset, q_idx, g_idx,
                    k_max: int) -> dict:
    q_emb = embed_fn(dataset.samples[q_idx])
    g_emb = embed_fn(dataset.samples[g_idx])
    dist = distance_matrix(q_emb, g_emb, "euclidean")
    result = evaluate_reid(dist, dataset.ids[q_idx], dataset.ids[g_idx],
                           dataset.cams[q_idx], dataset.cams[g_idx], k_max)
    return {"rank1": float(result.cmc[0]), "map": result.mean_ap,
            "valid_queries": result.valid_queries}


def train(cfg: RunConfig) -> TrainResult:
    dataset = gen_synthetic(cfg.num_identities, cfg.per_identity, cfg.dim,
                            cfg.intra_sigma, cfg.spread, cfg.seed,
                            num_cameras=cfg.num_cameras,
                            cam_spread=cfg.cam_spread)
    q_idx, g_idx = split_query_gallery(dataset, cfg.query_fraction, cfg.seed + 1)
    train_set = dataset.subset(g_idx, split="train")

    model_cfg = ToyModelConfig(input_dim=cfg.dim, hidden1=cfg.hidden1,
                               hidden2=cfg.hidden2, embed_dim=cfg.embed_dim,
                               num_classes=cfg.num_identities,
                               l2_normalize_output=cfg.l2_normalize,
                               gem_head=cfg.gem_head,
                               gem_positions=cfg.gem_positions)
    model = ToyModel(model_cfg, cfg.seed + 2)
    sampler = PkEpochSampler(train_set, PkSpec(cfg.pk_ids, cfg.pk_per_id),
                             cfg.seed + 3)
    erase_rng = np.random.default_rng(cfg.seed + 4)
    rea = ReaParams(probability=cfg.rea_prob) if cfg.rea_prob > 0 else None
    optimizer = SgdMomentum(model.parameters(), cfg.momentum, cfg.weight_decay)
    triplet_cfg = TripletConfig(cfg.loss_variant, cfg.margin, cfg.distance)
    smoothing = SmoothingConfig(cfg.smoothing_epsilon, cfg.num_identities)

    baseline = _evaluate_split(model.embed, dataset, q_idx, g_idx, cfg.k_max)
    trace: list[dict] = []

    def run_epoch(epoch_num: int, lr: float) -> float:
        losses = []
        for batch_idx in sampler.epoch():
            x = train_set.samples[batch_idx]
            if rea is not None:
                x = np.stack([erase_span_1d(row, rea, erase_rng) for row in x])
            ids = train_set.ids[batch_idx]
            emb, logits = model.forward(x)
            dist = pairwise_distances(emb, cfg.distance)
            loss = (cfg.triplet_weight * triplet_loss(dist, ids, triplet_cfg)
                    + cfg.ce_weight * cross_entropy_smoothed(logits, ids, smoothing))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(epoch_num, lr)
            model.zero_grads()
            backward(loss)
            optimizer.step(lr)
            if model.gem is not None:
                model.gem.project()
            losses.append(value)
        return float(np.mean(losses))

    for t in range(1, cfg.epochs + 1):
        lr = scaled_warmup_lr(t, cfg.epochs, cfg.peak_lr)
        mean_loss = run_epoch(t, lr)
        row = {"epoch": t, "lr": lr, "loss": mean_loss, "phase": "warmup-main"}
        if t % cfg.eval_every == 0 or t == cfg.epochs:
            row.update(_evaluate_split(model.embed, dataset, q_idx, g_idx,
                                       cfg.k_max))
        trace.append(row)

    snapshots: list[dict] = []
    posterior = None
    if cfg.swag:
        state = ScheduleState(base_lr=cfg.swag_base_lr,
                              cycle_length=cfg.swag_cycle_length,
                              cycle_count=cfg.swag_cycles)
        posterior = SwagPosterior(layout=model.layout())
        for e in range(state.total_cyclic_epochs):
            lr = cyclic_lr(e, state)
            mean_loss = run_epoch(cfg.epochs + e + 1, lr)
            row = {"epoch": cfg.epochs + e + 1, "lr": lr, "loss": mean_loss,
                   "phase": "cyclic"}
            if is_snapshot_epoch(e, state):
                collect_snapshot(posterior, model.get_weights())
                snap_metrics = _evaluate_split(model.embed, dataset, q_idx,
                                               g_idx, cfg.k_max)
                snapshots.append({"cycle": e // state.cycle_length,
                                  **snap_metrics})
                row.update(snap_metrics)
            trace.append(row)
        # averaged weights; the toy MLP has no running statistics to
        # refresh, so setting weights is the whole update
        model.set_weights(swa_weights(posterior))

    if cfg.swag and cfg.swag_inference == "bma" and posterior.count >= 2:
        def bma_embed(x):
            saved = model.get_weights()
            out = bma_predict(posterior, cfg.bma_samples, _weights_embedder(model),
                              x, scale=cfg.swag_scale, seed=cfg.seed + 5,
                              renormalize=cfg.l2_normalize)
            model.set_weights(saved)
            return out
        final = _evaluate_split(bma_embed, dataset, q_idx, g_idx, cfg.k_max)
    else:
        final = _evaluate_split(model.embed, dataset, q_idx, g_idx, cfg.k_max)

    result = TrainResult(model=model, config=cfg, trace=trace,
                         baseline=baseline, final=final, snapshots=snapshots,
                         posterior=posterior, dataset=dataset,
                         query_index=q_idx, gallery_index=g_idx)
    if cfg.out_dir:
        write_run_artifacts(result)
    return result


def _weights_embedder(model: ToyModel):
    """Raw (pre-normalization) embedding as a function of a weight vector,
    for Bayesian model averaging."""
    def run(weights, inputs):
        model.set_weights(weights)
        raw = model._embed_raw(inputs)
        return raw.values
    return run


# ---------------------------------------------------------------------------
# run artifacts

def write_run_artifacts(result: TrainResult) -> None:
    cfg = result.config
    os.makedirs(cfg.out_dir, exist_ok=True)

    with open(os.path.join(cfg.out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.echo())

    keys = ["epoch", "phase", "lr", "loss", "rank1", "map"]
    with open(os.path.join(cfg.out_dir, "trace.csv"), "w", encoding="utf-8") as fh:
        fh.write(",".join(keys) + "\n")
        for row in result.trace:
            fh.write(",".join(str(row.get(k, "")) for k in keys) + "\n")

    summary = {"baseline": result.baseline, "final": result.final,
               "snapshots": result.snapshots,
               "epochs": len(result.trace)}
    with open(os.path.join(cfg.out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if result.posterior is not None:
        save_posterior(result.posterior, os.path.join(cfg.out_dir, "posterior.bin"))

    _write_plots(result)


def _write_plots(result: TrainResult) -> None:
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "reidlab"
    import matplotlib.pyplot as plt

    cfg = result.config
    epochs = [row["epoch"] for row in result.trace]
    series = {
        "loss": [row["loss"] for row in result.trace],
        "lr": [row["lr"] for row in result.trace],
    }
    eval_rows = [(row["epoch"], row["map"]) for row in result.trace if "map" in row]
    for name, ys in series.items():
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(epochs, ys)
        ax.set_xlabel("epoch")
        ax.set_ylabel(name)
        fig.tight_layout()
        fig.savefig(os.path.join(cfg.out_dir, f"{name}.svg"),
                    metadata={"Date": None})
        plt.close(fig)
    if eval_rows:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot([e for e, _ in eval_rows], [m for _, m in eval_rows])
        ax.set_xlabel("epoch")
        ax.set_ylabel("mAP")
        fig.tight_layout()
        fig.savefig(os.path.join(cfg.out_dir, "map.svg"), metadata={"Date": None})
        plt.close(fig)
