"""Training and evaluation loops: optimizer, schedule, checkpoints, metrics.

Training runs AdamW under a one-cycle learning-rate schedule. Every step
forwards a batch, matches proposals to ground truth per scene, averages the
per-scene losses (in a fixed order, so deterministic mode reproduces logs
bit-for-bit) and appends one CSV row. Checkpoints are self-describing pickled
containers with a format-version integer, the config echo, model and optimizer
state and the torch RNG state; batch order is derived statelessly from
(seed, epoch), which makes resuming exact.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import SceneSample
from .gtgen import GroundTruthConfig, GroundTruthMaps, make_gaussian_map, make_ground_truth
from .losses import LossBreakdown, LossWeights, total_loss
from .matching import MatchWeights, match_instances
from .metrics import MetricReport, auc_score, gaze_distances, instance_map, oof_ap
from .model import HeadTargetNet, ModelConfig, build_model, images_to_tensor
from .model import CHECKPOINT_FORMAT_VERSION
from .postprocess import InstancePrediction, extract_gaze_point, to_instances

LOG_COLUMNS = ("step", "l_h", "l_g", "l_c", "l_det", "l_o", "total", "lr")
WARMUP_FRACTION = 0.3
START_LR_DIV = 25.0
FINAL_LR_DIV = 1e4


class NonFiniteLossError(RuntimeError):
    """Training aborted on a NaN/Inf loss; carries the offending batch ids."""

    def __init__(self, step: int, scene_ids: list[str]):
        super().__init__(f"non-finite loss at step {step}; batch scenes: {scene_ids}")
        self.step = step
        self.scene_ids = scene_ids


class CheckpointError(ValueError):
    """Checkpoint unusable: wrong format version or mismatched model config."""


@dataclass(frozen=True)
class TrainConfig:
    max_lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 8
    weight_decay: float = 1e-4
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    match_weights: MatchWeights = field(default_factory=MatchWeights)
    deterministic: bool = True
    max_steps: int | None = None  # total optimizer steps; overrides epochs when set

    def __post_init__(self):
        if not (self.max_lr > 0 and math.isfinite(self.max_lr)):
            raise ValueError("max_lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def one_cycle_lr(step: int, total_steps: int, max_lr: float) -> float:
    """One-cycle schedule value at ``step``.

    Cosine warmup from max_lr/25 to max_lr over the first 30% of steps, then
    cosine annealing down to max_lr/1e4 at the final step. Continuous and
    piecewise smooth; the peak sits exactly at the end of warmup.
    """
    if total_steps < 2:
        raise ValueError("schedule needs at least 2 steps")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warm = min(max(1, round(WARMUP_FRACTION * total_steps)), total_steps - 1)
    start = max_lr / START_LR_DIV
    floor = max_lr / FINAL_LR_DIV
    if step <= warm:
        u = step / warm
        return start + (max_lr - start) * 0.5 * (1.0 - math.cos(math.pi * u))
    u = (step - warm) / (total_steps - 1 - warm)
    return floor + (max_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * u))


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    # Stateless shuffle: resuming at any step recomputes the same order.
    return np.random.default_rng([seed, 7919, epoch]).permutation(n)


def save_checkpoint(
    path: str | Path,
    model: HeadTargetNet,
    optimizer: torch.optim.Optimizer,
    train_config: TrainConfig,
    epoch: int,
    step: int,
) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "model_config": asdict(model.config),
            "train_config": asdict(train_config),
            "epoch": epoch,
            "step": step,
            "model_state": model.state_dict(),
            "optimizer_state": optimizer.state_dict(),
            "torch_rng_state": torch.get_rng_state(),
        },
        path,
    )


def load_checkpoint(path: str | Path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {version}, expected {CHECKPOINT_FORMAT_VERSION}"
        )
    return payload


def model_from_checkpoint(payload: dict) -> HeadTargetNet:
    config = ModelConfig(**{**payload["model_config"], "heatmap_size": tuple(payload["model_config"]["heatmap_size"])})
    model = HeadTargetNet(config)
    model.load_state_dict(payload["model_state"])
    return model


def _precompute_targets(samples, gt_config, num_proposals) -> list[GroundTruthMaps]:
    targets = []
    for s in samples:
        if len(s.annotations) > num_proposals:
            raise ValueError(
                f"scene {s.scene_id} has {len(s.annotations)} instances, "
                f"more than the {num_proposals} proposals available"
            )
        targets.append(make_ground_truth(s.annotations, gt_config))
    return targets


def _scene_losses(model, images, idx, targets, config) -> tuple[LossBreakdown, torch.Tensor]:
    features, proposals = model(images)
    terms = []
    for b in range(images.shape[0]):
        gts = targets[idx[b]]
        scene = proposals.scene(b)
        with torch.no_grad():
            probs = torch.sigmoid(scene.oof_logits).numpy()
            assignment = match_instances(
                scene.head_maps.detach().numpy(),
                scene.gaze_maps.detach().numpy(),
                probs,
                gts,
                config.match_weights,
            )
        terms.append(total_loss(scene, features.h_det[b], gts, assignment, config.loss_weights))
    n = len(terms)
    mean = LossBreakdown(
        *(sum(getattr(t, f) for t in terms) / n for f in LossBreakdown.field_order())
    )
    return mean, mean.total


def train(
    samples: list[SceneSample],
    config: TrainConfig,
    model_config: ModelConfig,
    out_dir: str | Path,
    gt_config: GroundTruthConfig | None = None,
    resume: str | Path | None = None,
    log_name: str = "train_log.csv",
) -> Path:
    """Train on the given scenes; returns the path of the final checkpoint.

    Writes one CSV row per step and a checkpoint per epoch into ``out_dir``.
    With ``resume``, model/optimizer/RNG state and the step counter continue
    from the checkpoint; the new log covers only the remaining steps. Target
    maps default to the model's heatmap resolution.
    """
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    if gt_config is None:
        gt_config = GroundTruthConfig(heatmap_size=model_config.heatmap_size)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(config.seed)

    targets = _precompute_targets(samples, gt_config, model_config.num_proposals)
    all_images = images_to_tensor([s.image for s in samples])

    steps_per_epoch = math.ceil(len(samples) / config.batch_size)
    total_steps = config.max_steps if config.max_steps is not None else config.epochs * steps_per_epoch
    if total_steps < 2:
        raise ValueError("training needs at least 2 steps; raise epochs or dataset size")

    model = build_model(model_config, config.seed)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.max_lr / START_LR_DIV, weight_decay=config.weight_decay
    )
    start_step = 0
    if resume is not None:
        payload = load_checkpoint(resume)
        if payload["model_config"] != asdict(model_config):
            raise CheckpointError(
                f"checkpoint model config {payload['model_config']} does not match {asdict(model_config)}"
            )
        model.load_state_dict(payload["model_state"])
        optimizer.load_state_dict(payload["optimizer_state"])
        torch.set_rng_state(payload["torch_rng_state"])
        start_step = payload["step"] + 1

    model.train()
    log_path = out / log_name
    with open(log_path, "w", encoding="utf-8") as log:
        log.write(",".join(LOG_COLUMNS) + "\n")
        perm_epoch, perm = -1, None
        for step in range(start_step, total_steps):
            epoch = step // steps_per_epoch
            if epoch != perm_epoch:
                perm = _epoch_permutation(config.seed, epoch, len(samples))
                perm_epoch = epoch
            k = step % steps_per_epoch
            idx = perm[k * config.batch_size : (k + 1) * config.batch_size].tolist()

            lr = one_cycle_lr(step, total_steps, config.max_lr)
            for group in optimizer.param_groups:
                group["lr"] = lr

            try:
                breakdown, loss = _scene_losses(model, all_images[idx], idx, targets, config)
            except ValueError as exc:
                if "non-finite" in str(exc):  # NaN activations surface in the matching cost
                    raise NonFiniteLossError(step, [samples[i].scene_id for i in idx]) from exc
                raise
            if not torch.isfinite(loss):
                raise NonFiniteLossError(step, [samples[i].scene_id for i in idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            row = breakdown.detached()
            values = [str(step)] + [
                format(getattr(row, f), ".10g") for f in LossBreakdown.field_order()
            ] + [format(lr, ".10g")]
            log.write(",".join(values) + "\n")

            if (step + 1) % steps_per_epoch == 0 or step == total_steps - 1:
                save_checkpoint(out / f"checkpoint_epoch{epoch:03d}.pt", model, optimizer, config, epoch, step)

    final = out / "checkpoint.pt"
    save_checkpoint(final, model, optimizer, config, (total_steps - 1) // steps_per_epoch, total_steps - 1)
    return final


def _oracle_instances(sample: SceneSample) -> list[InstancePrediction]:
    out = []
    for ann in sample.annotations:
        gaze = ann.gaze_point if ann.gaze_point is not None else ann.head_center
        out.append(
            InstancePrediction(
                head_box=ann.head_box,
                gaze_point=gaze,
                oof_prob=1.0 if ann.out_of_frame else 0.0,
                confidence=1.0,
            )
        )
    return out


def evaluate(
    model: HeadTargetNet | None,
    samples: list[SceneSample],
    gt_config: GroundTruthConfig | None = None,
    match_weights: MatchWeights = MatchWeights(),
    batch_size: int = 8,
    oracle: bool = False,
    auc_gt_radius: int = 0,
    collect_predictions: bool = False,
) -> tuple[MetricReport, list[dict]]:
    """Full evaluation pass: forward, decode, match, score.

    AUC, distances and flag AP are computed over matched (proposal, instance)
    pairs, matching with the same Hungarian cost used in training; instance
    mAP ranks the decoded predictions dataset-wide. With ``oracle=True`` the
    predictions are constructed from the ground truth itself (no model
    needed), which must produce ideal metric values.
    """
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    if model is None and not oracle:
        raise ValueError("evaluate requires a model unless oracle=True")
    if gt_config is None:
        gt_config = GroundTruthConfig() if model is None else GroundTruthConfig(
            heatmap_size=model.config.heatmap_size
        )

    aucs: list[float] = []
    avg_dists: list[float] = []
    min_dists: list[float] = []
    flag_probs: list[float] = []
    flag_labels: list[bool] = []
    preds_by_scene: list[list[InstancePrediction]] = []
    gts_by_scene = [list(s.annotations) for s in samples]
    dump_rows: list[dict] = []

    if oracle:
        for sample in samples:
            insts = _oracle_instances(sample)
            preds_by_scene.append(insts)
            for ann, inst in zip(sample.annotations, insts):
                flag_probs.append(inst.oof_prob)
                flag_labels.append(ann.out_of_frame)
                if not ann.out_of_frame:
                    points = list(ann.gaze_candidates)
                    gmap = make_gaussian_map(ann.gaze_point, gt_config.sigma, gt_config.heatmap_size)
                    aucs.append(auc_score(gmap, points, auc_gt_radius))
                    a, mn = gaze_distances(inst.gaze_point, points)
                    avg_dists.append(a)
                    min_dists.append(mn)
    else:
        model.eval()
        with torch.no_grad():
            for lo in range(0, len(samples), batch_size):
                chunk = samples[lo : lo + batch_size]
                images = images_to_tensor([s.image for s in chunk])
                features, proposals = model(images)
                for b, sample in enumerate(chunk):
                    scene = proposals.scene(b).numpy()
                    insts = to_instances(scene)
                    preds_by_scene.append(insts)
                    gts = make_ground_truth(sample.annotations, gt_config)
                    if gts.num_instances == 0:
                        continue
                    probs = 1.0 / (1.0 + np.exp(-scene.oof_logits))
                    assignment = match_instances(
                        scene.head_maps, scene.gaze_maps, probs, gts, match_weights
                    )
                    for i, j in assignment.pairs:
                        ann = sample.annotations[j]
                        flag_probs.append(float(probs[i]))
                        flag_labels.append(ann.out_of_frame)
                        if not ann.out_of_frame:
                            points = list(ann.gaze_candidates)
                            aucs.append(auc_score(scene.gaze_maps[i], points, auc_gt_radius))
                            a, mn = gaze_distances(extract_gaze_point(scene.gaze_maps[i]), points)
                            avg_dists.append(a)
                            min_dists.append(mn)

    if collect_predictions:
        for sample, insts in zip(samples, preds_by_scene):
            for inst in insts:
                dump_rows.append(
                    {
                        "scene_id": sample.scene_id,
                        "head_box": list(inst.head_box),
                        "gaze_point": list(inst.gaze_point),
                        "oof_prob": inst.oof_prob,
                        "confidence": inst.confidence,
                    }
                )

    report = MetricReport(
        auc=float(np.mean(aucs)) if aucs else float("nan"),
        avg_dist=float(np.mean(avg_dists)) if avg_dists else float("nan"),
        min_dist=float(np.mean(min_dists)) if min_dists else float("nan"),
        map_instance=instance_map(preds_by_scene, gts_by_scene),
        oof_ap=oof_ap(flag_probs, flag_labels) if flag_probs else None,
        counts={
            "scenes": len(samples),
            "instances": sum(len(g) for g in gts_by_scene),
            "in_frame": sum(1 for g in gts_by_scene for a in g if not a.out_of_frame),
            "out_of_frame": sum(1 for g in gts_by_scene for a in g if a.out_of_frame),
            "predictions": sum(len(p) for p in preds_by_scene),
            "evaluated_pairs": len(flag_probs),
        },
    )
    return report, dump_rows


def rescore_predictions(dump_rows: list[dict], samples) -> float:
    """Recompute instance mAP from dumped predictions (offline round trip).

    ``samples`` may be SceneSamples or SceneRecords; only scene ids and
    annotations are consulted, so no images are needed.
    """
    by_scene: dict[str, list[InstancePrediction]] = {}
    for row in dump_rows:
        by_scene.setdefault(row["scene_id"], []).append(
            InstancePrediction(
                head_box=tuple(row["head_box"]),
                gaze_point=tuple(row["gaze_point"]),
                oof_prob=float(row["oof_prob"]),
                confidence=float(row["confidence"]),
            )
        )
    preds = [by_scene.get(s.scene_id, []) for s in samples]
    return instance_map(preds, [list(s.annotations) for s in samples])
