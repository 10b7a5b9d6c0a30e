"""Training loop, evaluation and the ablation grid."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor, backward
from .batched import batch_objective
from .config import ConfigError, RunConfig, save_config
from .geometry import (
    DegenerateInputError,
    PointCloud,
    Pose,
    add_metric,
    adds_metric,
    auc,
    chamfer,
    inverse_transform,
    metric_rows,
    rate_below,
    save_ply,
    transform,
    write_metrics_csv,
)
from .losses import LossParts, loss_c2c, loss_conf, loss_p2p, loss_pose, total_loss
from .network import ForwardResult, NetworkConfig, PoseNet
from .nn import adam_step, read_container, write_container
from .synthdata import Sample, default_shapes, generate_dataset, load_manifest

LOG_HEADER = "step,loss_p2p,loss_c2c,loss_pose,loss_conf,total"


class TrainingError(RuntimeError):
    """Training aborted; details were dumped next to the log."""


@dataclass
class TrainOutputs:
    final_checkpoint: Path
    best_checkpoint: Path
    log_path: Path
    steps: int
    best_val_add: float


def synthesize(cfg: RunConfig) -> tuple[Path, Path]:
    """Generate the configured dataset; returns manifest paths."""
    return generate_dataset(
        default_shapes(),
        count=cfg.data.count,
        split_ratio=cfg.data.split_ratio,
        seed=cfg.seed,
        out_dir=cfg.data.data_dir,
        n_obs=cfg.network.n_points_obs,
        n_model=cfg.network.n_points_model,
        n_dense=cfg.data.n_dense,
        occlusion_max=cfg.data.occlusion_max,
        noise_sigma=cfg.data.noise_sigma,
        translation_range=cfg.data.translation_range,
    )


def sample_objective(net: PoseNet, sample: Sample, cfg: RunConfig):
    """Per-sample weighted loss plus detached part values for logging."""
    result = net.forward(sample.obs, sample.model)
    zero = lambda: Tensor([[0.0]])
    parts = LossParts(
        p2p=(loss_p2p(result.p2p.decoded_points, sample.obs.points, sample.gt,
                      sample.symmetry) if result.p2p else zero()),
        c2c=(loss_c2c(result.c2c.decoded_points, sample.model.points, sample.gt,
                      sample.symmetry) if result.c2c else zero()),
        pose=loss_pose(result.rot, result.trans, sample.gt, sample.model.points,
                       sample.symmetry),
        conf=zero(),
    )
    if result.scores is not None and result.p2p is not None and result.c2c is not None:
        parts.conf = loss_conf(
            result.p2p.decoded_points, result.c2c.decoded_points,
            sample.obs.points, sample.model.points, result.rot, result.trans,
            result.scores.s, sample.symmetry, w=cfg.loss_weights.w)
    loss = total_loss(parts, cfg.loss_weights)
    if net.refiner is not None and cfg.refine_train_iters > 0:
        state = net.make_refine_state(result)
        refine_term = net.refiner.training_loss(
            result.pose, state, sample.obs.points, sample.gt,
            sample.model.points, sample.symmetry, cfg.refine_train_iters)
        loss = ad.add(loss, ad.mul(refine_term, cfg.refine_loss_weight))
    values = {
        "p2p": parts.p2p.item(), "c2c": parts.c2c.item(),
        "pose": parts.pose.item(), "conf": parts.conf.item(),
    }
    return loss, values


def _predict_pose(net: PoseNet, sample: Sample, refine_iters: int) -> tuple[Pose, ForwardResult]:
    result = net.forward(sample.obs, sample.model)
    pose = result.pose
    if net.refiner is not None and refine_iters > 0:
        state = net.make_refine_state(result)
        pose = net.refiner.refine_loop(result.pose, state, sample.obs.points,
                                       refine_iters)
    return pose, result


def _validation_add(net: PoseNet, samples: list[Sample], refine_iters: int) -> float:
    if not samples:
        return float("nan")
    errs = []
    for s in samples:
        pose, _ = _predict_pose(net, s, refine_iters)
        errs.append(add_metric(pose, s.gt, s.model.points))
    return float(np.mean(errs))


def _save_ckpt(net: PoseNet, path: Path, epoch: int) -> None:
    arrays = net.store.state_arrays()
    arrays["meta.epoch"] = np.array([float(epoch)])
    write_container(path, arrays)


def load_ckpt(net: PoseNet, path) -> int:
    """Restore parameters and optimizer state; returns epochs completed."""
    arrays = read_container(path)
    epoch = int(arrays.pop("meta.epoch", np.zeros(1)).reshape(-1)[0])
    net.store.load_state(arrays)
    return epoch


def train_model(cfg: RunConfig, resume_from=None, hook=None) -> TrainOutputs:
    """Seeded epoch loop over the train manifest with per-step CSV logging.

    Checkpoints land in out_dir as final.ckpt and best.ckpt (lowest
    validation ADD).  Resuming from an epoch-boundary checkpoint reproduces
    the uninterrupted run's remaining trajectory exactly.
    """
    if not cfg.train_manifest.is_file():
        raise ConfigError(f"train manifest not found: {cfg.train_manifest}")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.json")

    samples = load_manifest(cfg.train_manifest)
    n_val = min(cfg.val_max, int(len(samples) * cfg.val_fraction))
    val_samples = samples[len(samples) - n_val:] if n_val > 0 else []
    train_samples = samples[:len(samples) - n_val] if n_val > 0 else samples
    if not train_samples:
        raise ConfigError("no training samples after the validation split")

    net = PoseNet(cfg.network)
    start_epoch = 0
    if resume_from is not None:
        start_epoch = load_ckpt(net, resume_from)

    log_path = out_dir / "train_log.csv"
    steps_per_epoch = (len(train_samples) + cfg.batch_size - 1) // cfg.batch_size
    step = start_epoch * steps_per_epoch
    best_val = float("inf")
    best_path = out_dir / "best.ckpt"
    final_path = out_dir / "final.ckpt"

    with open(log_path, "w") as log:
        log.write(LOG_HEADER + "\n")
        for epoch in range(start_epoch, cfg.epochs):
            order = np.random.default_rng(
                np.random.SeedSequence((cfg.seed, 2, epoch))).permutation(len(train_samples))
            for lo in range(0, len(order), cfg.batch_size):
                batch_ids = order[lo:lo + cfg.batch_size]
                try:
                    total, means = batch_objective(
                        net, [train_samples[i] for i in batch_ids],
                        cfg.loss_weights, cfg.refine_train_iters,
                        cfg.refine_loss_weight)
                    backward(total)
                    adam_step(net.store, cfg.lr_at_epoch(epoch))
                except NonFiniteError as exc:
                    dump = {"epoch": epoch, "step": step,
                            "batch_indices": [int(i) for i in batch_ids],
                            "error": str(exc)}
                    (out_dir / "nan_dump.json").write_text(json.dumps(dump, indent=2))
                    raise TrainingError(
                        f"non-finite loss at step {step}; batch dumped to nan_dump.json"
                    ) from exc
                step += 1
                logged_total = (
                    cfg.loss_weights.lambda_p2p * means["p2p"]
                    + cfg.loss_weights.lambda_c2c * means["c2c"]
                    + cfg.loss_weights.lambda_pose * means["pose"]
                    + cfg.loss_weights.lambda_conf * means["conf"]
                )
                log.write(f"{step},{means['p2p']!r},{means['c2c']!r},"
                          f"{means['pose']!r},{means['conf']!r},{logged_total!r}\n")
                if hook is not None:
                    hook(step=step, net=net, losses=means)
            val_add = _validation_add(net, val_samples, cfg.refine_iters)
            if val_samples and val_add < best_val:
                best_val = val_add
                _save_ckpt(net, best_path, epoch + 1)
            _save_ckpt(net, final_path, epoch + 1)
    if not val_samples:
        best_val = float("nan")
        _save_ckpt(net, best_path, cfg.epochs)
    return TrainOutputs(final_path, best_path, log_path, step, best_val)


def evaluate_model(cfg: RunConfig, checkpoint, with_oracle: bool = False,
                   refine_iters: int | None = None, out_dir=None,
                   manifest=None, dump_recon: int = 8) -> dict:
    """Metrics over the test manifest; writes CSVs and a summary JSON.

    Read-only with respect to dataset and checkpoint.  The headline
    aggregates are computed on refined predictions; unrefined (and
    optionally least-squares oracle) aggregates ride along.
    """
    refine_iters = cfg.refine_iters if refine_iters is None else refine_iters
    manifest = manifest if manifest is not None else cfg.test_manifest
    if not Path(manifest).is_file():
        raise ConfigError(f"test manifest not found: {manifest}")
    net = PoseNet(cfg.network)
    load_ckpt(net, checkpoint)
    samples = load_manifest(manifest)
    out_dir = Path(out_dir) if out_dir is not None else Path(cfg.out_dir) / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    recon_dir = out_dir / "recon"

    per_pose: dict[str, dict[str, list]] = {
        kind: {"add": [], "adds": [], "addx": []}
        for kind in ("refined", "unrefined", "oracle")
    }
    cd_p2p, cd_c2c, sample_ids, diam_hits = [], [], [], {"refined": [], "unrefined": [], "oracle": []}

    def record(kind: str, pose: Pose | None, s: Sample):
        if pose is None:
            # failed solve: beyond every threshold in use
            e_add = e_adds = 1.0
        else:
            e_add = add_metric(pose, s.gt, s.model.points)
            e_adds = adds_metric(pose, s.gt, s.model.points)
        per_pose[kind]["add"].append(e_add)
        per_pose[kind]["adds"].append(e_adds)
        addx = e_adds if s.symmetry.is_symmetric else e_add
        per_pose[kind]["addx"].append(addx)
        diam_hits[kind].append(addx < 0.1 * s.diameter)

    for i, s in enumerate(samples):
        sample_ids.append(f"{i:06d}")
        pose_unref, result = _predict_pose(net, s, refine_iters=0)
        record("unrefined", pose_unref, s)
        if net.refiner is not None and refine_iters > 0:
            state = net.make_refine_state(result)
            pose_ref = net.refiner.refine_loop(result.pose, state, s.obs.points,
                                               refine_iters)
        else:
            pose_ref = pose_unref
        record("refined", pose_ref, s)
        if result.p2p is not None:
            cd_p2p.append(chamfer(result.p2p.decoded_points.data,
                                  inverse_transform(s.gt, s.obs.points)))
        if result.c2c is not None:
            cd_c2c.append(chamfer(result.c2c.decoded_points.data,
                                  transform(s.gt, s.model.points)))
        if with_oracle and (result.p2p is not None or result.c2c is not None):
            try:
                oracle_pose = net.solve_from_correspondence(
                    result.p2p, result.c2c, s.obs, s.model, scores=result.scores)
            except DegenerateInputError:
                oracle_pose = None
            record("oracle", oracle_pose, s)
        if i < dump_recon and result.p2p is not None:
            recon_dir.mkdir(exist_ok=True)
            save_ply(recon_dir / f"{i:06d}_p2p.ply",
                     PointCloud(result.p2p.decoded_points.data, frame="object"))
            if result.c2c is not None:
                save_ply(recon_dir / f"{i:06d}_c2c.ply",
                         PointCloud(result.c2c.decoded_points.data, frame="camera"))

    def aggregates(kind: str) -> dict:
        pp = per_pose[kind]
        return {
            "auc": auc(pp["adds"], 0.1),
            "below_2cm": rate_below(pp["adds"], 0.02),
            "add_s_10pct_diameter": 100.0 * float(np.mean(diam_hits[kind])),
            "mean_add": float(np.mean(pp["add"])),
        }

    summary = aggregates("refined")
    summary["cd_p2p"] = float(np.mean(cd_p2p)) if cd_p2p else float("nan")
    summary["cd_c2c"] = float(np.mean(cd_c2c)) if cd_c2c else float("nan")
    summary["unrefined"] = aggregates("unrefined")
    summary["n_samples"] = len(samples)
    summary["refine_iters"] = refine_iters
    if with_oracle and per_pose["oracle"]["add"]:
        summary["oracle"] = aggregates("oracle")

    for kind, name in (("refined", "metrics_refined.csv"),
                       ("unrefined", "metrics_unrefined.csv")):
        write_metrics_csv(out_dir / name, metric_rows(
            sample_ids, per_pose[kind]["adds"], per_pose[kind]["add"]))
    if with_oracle and per_pose["oracle"]["add"]:
        write_metrics_csv(out_dir / "metrics_oracle.csv", metric_rows(
            sample_ids, per_pose["oracle"]["adds"], per_pose["oracle"]["add"]))
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# ---------------------------------------------------------------------------
# ablation grid

def _variant_config(cfg: RunConfig, variant: str, use_confidence: bool,
                    with_refiner: bool, tag: str) -> RunConfig:
    network = replace(cfg.network, variant=variant, use_confidence=use_confidence,
                      with_refiner=with_refiner)
    return replace(cfg, network=network, out_dir=str(Path(cfg.out_dir) / tag))


def run_ablation(cfg: RunConfig) -> dict:
    """Train the ablation grid and emit the three comparison tables.

    Correspondence-module rows are trained without confidence weighting or
    refinement; the confidence table compares direct regression with the
    least-squares solve over decoded correspondences; the refinement table
    evaluates the full model at zero and at the configured iterations.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    fda_rows = []
    for variant in ("none", "p2p", "c2c", "dual"):
        run_cfg = _variant_config(cfg, variant, use_confidence=False,
                                  with_refiner=False, tag=f"fda_{variant}")
        outputs = train_model(run_cfg)
        summary = evaluate_model(run_cfg, outputs.final_checkpoint,
                                 refine_iters=0, dump_recon=0)
        fda_rows.append({
            "p2p": variant in ("p2p", "dual"), "c2c": variant in ("c2c", "dual"),
            "auc": summary["auc"], "below_2cm": summary["below_2cm"],
            "cd_p2p": summary["cd_p2p"], "cd_c2c": summary["cd_c2c"],
        })
        if variant == "dual":
            dual_noconf_cfg, dual_noconf_ckpt = run_cfg, outputs.final_checkpoint

    conf_cfg = _variant_config(cfg, "dual", use_confidence=True,
                               with_refiner=True, tag="dual_conf")
    conf_outputs = train_model(conf_cfg)

    conf_rows = []
    for label, run_cfg, ckpt in (("without", dual_noconf_cfg, dual_noconf_ckpt),
                                 ("with", conf_cfg, conf_outputs.final_checkpoint)):
        summary = evaluate_model(run_cfg, ckpt, with_oracle=True,
                                 refine_iters=0, dump_recon=0,
                                 out_dir=Path(run_cfg.out_dir) / "eval_oracle")
        conf_rows.append({"confidence": label, "estimator": "least_squares",
                          "auc": summary["oracle"]["auc"],
                          "below_2cm": summary["oracle"]["below_2cm"]})
        conf_rows.append({"confidence": label, "estimator": "regression",
                          "auc": summary["auc"], "below_2cm": summary["below_2cm"]})

    refine_rows = []
    for label, iters in (("without", 0), ("with", cfg.refine_iters)):
        summary = evaluate_model(conf_cfg, conf_outputs.final_checkpoint,
                                 refine_iters=iters, dump_recon=0,
                                 out_dir=Path(conf_cfg.out_dir) / f"eval_refine_{iters}")
        refine_rows.append({"refinement": label, "auc": summary["auc"],
                            "below_2cm": summary["below_2cm"],
                            "mean_add": summary["mean_add"]})

    def write_table(name: str, rows: list[dict]):
        path = out_dir / name
        cols = list(rows[0])
        lines = [",".join(cols)]
        lines += [",".join(str(r[c]) for c in cols) for r in rows]
        path.write_text("\n".join(lines) + "\n")
        return path

    write_table("fda_table.csv", fda_rows)
    write_table("conf_table.csv", conf_rows)
    write_table("refine_table.csv", refine_rows)
    return {"fda": fda_rows, "confidence": conf_rows, "refinement": refine_rows}
