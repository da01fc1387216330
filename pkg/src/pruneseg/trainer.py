"""The two-stage training loop (optimize, then prune), evaluation with
sliding-window inference, and the artifacts they emit.

Each epoch runs a fixed number of optimizer iterations and then hands the
epoch-mean decoupling losses to the pruning controller (skipped entirely in
retrain mode).  Every controller event forces a checkpoint so each
mask/commit/restore boundary can be replayed, and all randomness comes from
serialized Philox streams, which makes runs reproducible and resumable.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autograd as ag
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import PhantomDataset, LabelVolume, label_pyramid
from .errors import ConfigError, DataError, NumericError
from .losses import LossConfig, dice_ce_deep_supervision, gt_mask_image, rl_loss, total_loss, tr_loss
from .metrics import dice_score, nsd_score
from .network import Network, build_network, network_from_descriptor
from .optim import make_optimizer
from .pruning import ControllerState, build_calibration_cache, controller_step

CSV_COLUMNS = ("epoch", "l_seg", "l_tr", "l_rl", "l_total",
               "params_effective", "branches_active", "event", "seconds")
NSD_TOLERANCE_MM = 2.0


class TrainingDiverged(RuntimeError):
    pass


class PatchSampler:
    """Seeded random crops from an in-memory dataset split."""

    def __init__(self, dataset: PhantomDataset, patch_size: tuple[int, int, int]):
        self.dataset = dataset
        self.patch = tuple(patch_size)
        for img in dataset.images:
            if any(d < p for d, p in zip(img.dims, self.patch)):
                raise DataError(f"volume dims {img.dims} smaller than patch {self.patch}")

    def __len__(self):
        return len(self.dataset)

    def crop(self, index: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        img = self.dataset.images[index].voxels
        lab = self.dataset.labels[index].labels
        off = [int(rng.integers(0, d - p + 1)) if d > p else 0
               for d, p in zip(img.shape, self.patch)]
        sl = tuple(slice(o, o + p) for o, p in zip(off, self.patch))
        return img[sl], lab[sl]

    def extract(self, index: int, rng: np.random.Generator) -> np.ndarray:
        """Calibration interface: one image patch with a leading channel axis."""
        img, _ = self.crop(index, rng)
        return img[None]


@dataclass
class TrainArtifacts:
    out_dir: Path
    final_checkpoint: Path
    csv_path: Path
    events_path: Path
    timeline_path: Path
    architecture_path: Path
    records: list[dict]


def _build_fresh(config: TrainConfig, dtype) -> tuple[Network, ControllerState]:
    if config.mode == "retrain":
        desc = json.loads(Path(config.architecture).read_text())
        net = network_from_descriptor(desc, seed=config.seed, dtype=dtype, compact=True)
        controller = ControllerState(p=0)  # pruning machinery stays off
    else:
        net = build_network(config.model_config(), seed=config.seed, dtype=dtype)
        controller = ControllerState(p=config.prune_step())
    return net, controller


def _batch_tensors(sampler: PatchSampler, rng, batch_size: int, dtype):
    ids = rng.integers(0, len(sampler), size=batch_size)
    imgs = []
    labs = []
    for i in ids:
        img, lab = sampler.crop(int(i), rng)
        imgs.append(img)
        labs.append(lab)
    x = np.stack(imgs)[:, None].astype(dtype, copy=False)
    y = np.stack(labs)
    return x, y


def _format(v: float) -> str:
    return f"{v:.17g}"


def train(config: TrainConfig, resume: Optional[str] = None) -> TrainArtifacts:
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(config.precision)
    dataset = PhantomDataset(config.dataset, "train")
    sampler = PatchSampler(dataset, config.patch_size)
    loss_cfg = LossConfig(**config.loss)

    if resume is not None:
        ckpt = load_checkpoint(resume)
        net = ckpt.net
        controller = ckpt.controller
        optimizer = make_optimizer(ckpt.optimizer_kind, net.parameters(), ckpt.optimizer_hyper)
        optimizer.load_state(ckpt.optimizer_meta, ckpt.optimizer_slots)
        data_rng = np.random.Generator(np.random.Philox())
        data_rng.bit_generator.state = ckpt.rng_states["data"]
        start_epoch = ckpt.epoch + 1
    else:
        net, controller = _build_fresh(config, dtype)
        opt = dict(config.optimizer)
        optimizer = make_optimizer(opt.pop("kind", "adamw"), net.parameters(), opt)
        data_rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence([config.seed, 1])))
        start_epoch = 0

    divisor = 2 ** (net.config.depth - 1)
    if any(p % divisor != 0 for p in config.patch_size):
        raise ConfigError(f"patch size {config.patch_size} must be divisible by {divisor}")
    levels = net.config.depth - 1

    if controller is None:
        controller = ControllerState(p=0)

    csv_path = out_dir / "epochs.csv"
    events_path = out_dir / "events.jsonl"
    if resume is None or not csv_path.exists():
        csv_path.write_text(",".join(CSV_COLUMNS) + "\n")
    if resume is None or not events_path.exists():
        init_event = {"epoch": -1, "event": "Init", "p": controller.p,
                      "masked_set": [], "fd": None, "best_fd": None,
                      "prm_ids": [prm.identifier for prm in net.prms],
                      "kernels": [[list(b.spec.kernel) for b in prm.branches]
                                  for prm in net.prms],
                      "states": [prm.states() for prm in net.prms],
                      "mode": config.mode}
        events_path.write_text(json.dumps(init_event) + "\n")

    current_epoch = [0]

    def cache_builder(n: Network):
        cache_seed_val = int(np.random.SeedSequence(
            [config.seed, 777, current_epoch[0]]).generate_state(1)[0])
        return build_calibration_cache(n, sampler, config.calibration_count, cache_seed_val)

    records: list[dict] = []
    last_ckpt = Path(resume) if resume is not None else out_dir / "final.ckpt"

    def save(tag: str, epoch: int) -> Path:
        path = out_dir / tag
        save_checkpoint(path, net, optimizer, controller,
                        {"data": data_rng.bit_generator.state}, epoch,
                        extra={"mode": config.mode})
        return path

    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        sums = {"l_seg": 0.0, "l_tr": 0.0, "l_rl": 0.0, "l_total": 0.0}
        for _ in range(config.iterations_per_epoch):
            x_np, y_np = _batch_tensors(sampler, data_rng, config.batch_size, dtype)
            pyramid = label_pyramid(y_np, levels)
            with ag.Tape():
                x = ag.tensor(x_np)
                outs = net.forward(x)
                with ag.no_grad():
                    masked_img = gt_mask_image(ag.tensor(x_np), y_np[:, None])
                    enc_target = ag.stop_gradient(net.forward_encoder(masked_img))
                try:
                    breakdown = total_loss(
                        dice_ce_deep_supervision(outs.logits, pyramid, loss_cfg),
                        tr_loss(outs.encoder_code, enc_target, loss_cfg.cosine_eps),
                        rl_loss(outs.features, pyramid, loss_cfg),
                        loss_cfg)
                except NumericError as exc:
                    raise TrainingDiverged(
                        f"epoch {epoch}: {exc}; last checkpoint kept at {last_ckpt}") from exc
                grads = ag.backward(breakdown.l_total)
            optimizer.step(grads)
            for k, v in breakdown.scalars().items():
                sums[k] += v
        means = {k: v / config.iterations_per_epoch for k, v in sums.items()}

        events: list[dict] = []
        if config.mode == "prune":
            current_epoch[0] = epoch
            events = controller_step(controller, epoch, means["l_tr"], means["l_rl"],
                                     net, cache_builder,
                                     window=config.convergence_window,
                                     threshold=config.improvement_threshold)
        counts = net.parameter_counts()
        seconds = time.perf_counter() - t0
        record = {"epoch": epoch, **means,
                  "params_effective": counts["effective"],
                  "branches_active": net.active_branch_count(),
                  "event": ";".join(e["event"] for e in events),
                  "seconds": seconds}
        records.append(record)
        with open(csv_path, "a") as fh:
            w = csv.writer(fh)
            w.writerow([record["epoch"], _format(record["l_seg"]), _format(record["l_tr"]),
                        _format(record["l_rl"]), _format(record["l_total"]),
                        record["params_effective"], record["branches_active"],
                        record["event"], f"{seconds:.3f}"])
        if events:
            with open(events_path, "a") as fh:
                for e in events:
                    fh.write(json.dumps(e) + "\n")
        force = bool(events) or (config.checkpoint_every
                                 and (epoch + 1) % config.checkpoint_every == 0)
        if force:
            last_ckpt = save(f"ckpt_ep{epoch:04d}.bin", epoch)

    final_path = save("final.ckpt", config.epochs - 1)
    arch_path = out_dir / "architecture.json"
    arch_path.write_text(json.dumps(net.descriptor(), indent=1))
    timeline_path = out_dir / "timeline.json"
    from .reporting import timeline_from_events  # local import avoids a cycle
    timeline_path.write_text(json.dumps(
        timeline_from_events(_read_events(events_path), config.epochs), indent=1))
    return TrainArtifacts(out_dir, final_path, csv_path, events_path,
                          timeline_path, arch_path, records)


def _read_events(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    return [json.loads(ln) for ln in lines if ln.strip()]


# ---------------------------------------------------------------------------
# Evaluation


def sliding_window_logits(net: Network, image: np.ndarray,
                          patch: tuple[int, int, int]) -> tuple[np.ndarray, bool]:
    """Overlap-averaged full-volume logits; stride is half the window.

    Volumes smaller than the window are symmetrically zero-padded (flagged in
    the second return value) and cropped back after averaging.
    """
    dims = image.shape
    padded = False
    pad = [(0, 0)] * 3
    for i in range(3):
        if dims[i] < patch[i]:
            padded = True
            short = patch[i] - dims[i]
            pad[i] = (short // 2, short - short // 2)
    if padded:
        image = np.pad(image, pad)
    dims_p = image.shape
    num_classes = net.config.num_classes
    acc = np.zeros((num_classes,) + dims_p, dtype=np.float64)
    cnt = np.zeros(dims_p, dtype=np.float64)

    def offsets(dim, win):
        stride = max(1, win // 2)
        offs = list(range(0, dim - win + 1, stride))
        if offs[-1] != dim - win:
            offs.append(dim - win)
        return offs

    for od in offsets(dims_p[0], patch[0]):
        for oh in offsets(dims_p[1], patch[1]):
            for ow in offsets(dims_p[2], patch[2]):
                sl = (slice(od, od + patch[0]), slice(oh, oh + patch[1]),
                      slice(ow, ow + patch[2]))
                win = image[sl][None, None].astype(net.dtype, copy=False)
                with ag.no_grad():
                    out = net.forward(ag.tensor(win))
                acc[(slice(None),) + sl] += out.logits[0].data[0]
                cnt[sl] += 1.0
    logits = acc / cnt
    crop = tuple(slice(p[0], p[0] + d) for p, d in zip(pad, dims))
    return logits[(slice(None),) + crop], padded


def prediction_report(pred: LabelVolume, gt: LabelVolume, num_classes: int,
                      tolerance_mm: float = NSD_TOLERANCE_MM) -> dict:
    """Per-class DSC and NSD for one volume, flagging empty-mask conventions."""
    per_class = {}
    for cls in range(1, num_classes):
        gt_empty = not bool((gt.labels == cls).any())
        pred_empty = not bool((pred.labels == cls).any())
        per_class[str(cls)] = {
            "dsc": dice_score(pred, gt, cls),
            "nsd": nsd_score(pred, gt, cls, tolerance_mm),
            "empty_convention": gt_empty or pred_empty,
        }
    return per_class


def evaluate(config: TrainConfig, ckpt_path, split: str = "test",
             report_path: Optional[Path] = None) -> dict:
    """Sliding-window inference over a split plus per-class DSC/NSD means."""
    dataset = PhantomDataset(config.dataset, split)
    ckpt: Checkpoint = load_checkpoint(ckpt_path)
    net = ckpt.net
    num_classes = net.config.num_classes
    volumes = []
    for img, lab in zip(dataset.images, dataset.labels):
        logits, padded = sliding_window_logits(net, img.voxels, config.patch_size)
        pred = LabelVolume(np.argmax(logits, axis=0).astype(np.uint16), img.spacing)
        entry = prediction_report(pred, lab, num_classes)
        volumes.append({"classes": entry, "padded": padded})
    report = {"checkpoint": str(ckpt_path), "split": split, "epoch": ckpt.epoch,
              "n_volumes": len(volumes), "volumes": volumes,
              "params_effective": net.parameter_counts()["effective"]}
    for cls in range(1, num_classes):
        key = str(cls)
        report[f"mean_dsc_class_{key}"] = float(np.mean(
            [v["classes"][key]["dsc"] for v in volumes]))
        report[f"mean_nsd_class_{key}"] = float(np.mean(
            [v["classes"][key]["nsd"] for v in volumes]))
    report["mean_dsc"] = float(np.mean(
        [report[f"mean_dsc_class_{c}"] for c in range(1, num_classes)]))
    report["mean_nsd"] = float(np.mean(
        [report[f"mean_nsd_class_{c}"] for c in range(1, num_classes)]))
    if report_path is not None:
        Path(report_path).write_text(json.dumps(report, indent=1))
    return report
