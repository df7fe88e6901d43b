"""Pretraining: loss composition, schedule, fit loop, reconstruction panels.

The total loss is l_rec = l_mse + l_ot with unit weights:

* l_mse: mean squared error over masked background patches against the
  original image (background pixels are identical in the composite).
* l_ot: entropic transport cost between the original crop patches and the
  predictions at all crop positions; the plan is solved outside the graph
  and held constant, so gradients flow only through the cost entries.

Toggles carve out the ablation arms.  With use_ot_loss off the crop term
becomes a plain MSE over masked crop patches.  With split masking off a
single mask is drawn over all patches; if the OT term is also off the two
terms collapse into one mean over all masked patches, which makes the
all-toggles-off configuration exactly plain masked-autoencoder training.

One fit is byte-reproducible given its seed: single-threaded torch, all
randomness drawn from spawns of one numpy SeedSequence, metrics written
with fixed formatting (the wall-clock seconds column is exempt from the
reproducibility guarantee).
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import transport
from .errors import TrainingDiverged, ValidationError
from .geometry import RotatedCropSpec, composite, sample_crop_spec
from .images import DatasetSpec, Image, generate_synthetic, load_dataset
from .model import AngleMaskedAutoencoder, ModelConfig, build_model, save_checkpoint
from .patching import MaskLayout, patchify, sample_mask, sample_mask_joint, split_indices, unpatchify

METRICS_HEADER = "step,l_mse,l_ot,l_rec,lr,seconds"


@dataclass(frozen=True)
class TrainConfig:
    # data: directory of .ppm images, or a synthetic dataset when empty
    data_dir: str = ""
    synth_count: int = 256
    synth_shape_kind: str = "oriented_bar"
    # model
    image_size: int = 96
    p: int = 8
    channels: int = 3
    enc_dim: int = 64
    enc_depth: int = 2
    enc_heads: int = 4
    dec_dim: int = 32
    dec_depth: int = 1
    dec_heads: int = 4
    # compositing and masking
    a: int = 32
    theta_min: float = -math.pi / 4
    theta_max: float = math.pi / 4
    ratio_crop: float = 0.75
    ratio_bg: float = 0.75
    # transport
    epsilon_rel: float = 0.1
    sinkhorn_max_iters: int = 1000
    sinkhorn_tol: float = 1e-6
    # optimization; base_lr follows the linear scaling rule (x batch/256)
    batch_size: int = 64
    steps: int = 300
    warmup_steps: int = 30
    base_lr: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    # bookkeeping
    checkpoint_every: int = 100
    seed: int = 0
    # toggles
    use_angle_embedding: bool = True
    use_scaling_center_crop: bool = True
    use_split_masking: bool = True
    use_ot_loss: bool = True

    def validate(self) -> None:
        self.model_config().validate()
        if self.a < self.p or self.a % self.p != 0 or self.a > self.image_size:
            raise ValidationError(
                f"crop side a={self.a} must be a multiple of p={self.p} within the image"
            )
        if not (math.isfinite(self.theta_min) and math.isfinite(self.theta_max)):
            raise ValidationError("theta range must be finite")
        if self.theta_min > self.theta_max:
            raise ValidationError("theta_min must be <= theta_max")
        for name in ("ratio_crop", "ratio_bg"):
            r = getattr(self, name)
            if not 0.0 <= r <= 1.0:
                raise ValidationError(f"{name}={r} outside [0, 1]")
        if self.epsilon_rel <= 0.0:
            raise ValidationError("epsilon_rel must be > 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ValidationError("batch_size must be >= 1 and steps >= 0")
        if self.warmup_steps < 0 or self.warmup_steps > self.steps:
            raise ValidationError("warmup_steps must lie in [0, steps]")
        if self.base_lr <= 0.0 or self.weight_decay < 0.0:
            raise ValidationError("base_lr must be > 0 and weight_decay >= 0")
        for b in (self.beta1, self.beta2):
            if not 0.0 <= b < 1.0:
                raise ValidationError("betas must lie in [0, 1)")
        if self.checkpoint_every < 1 or self.synth_count < 1:
            raise ValidationError("checkpoint_every and synth_count must be >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size,
            p=self.p,
            channels=self.channels,
            enc_dim=self.enc_dim,
            enc_depth=self.enc_depth,
            enc_heads=self.enc_heads,
            dec_dim=self.dec_dim,
            dec_depth=self.dec_depth,
            dec_heads=self.dec_heads,
            use_angle_embedding=self.use_angle_embedding,
            seed=self.seed,
        )

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256.0


def format_train_config(cfg: TrainConfig) -> str:
    return "".join(
        f"{f.name} = {getattr(cfg, f.name)}\n" for f in dataclasses.fields(TrainConfig)
    )


def parse_train_config(text: str) -> TrainConfig:
    """Strict `key = value` parser; keys are exactly the TrainConfig field
    names.  Blank lines and # comments are allowed."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep or not key:
            raise ValidationError(f"config line {lineno}: expected `key = value`")
        if key not in types:
            raise ValidationError(f"config line {lineno}: unknown key {key!r}")
        try:
            if types[key] == "int":
                kwargs[key] = int(value)
            elif types[key] == "float":
                kwargs[key] = float(value)
            elif types[key] == "bool":
                if value.lower() not in ("true", "false"):
                    raise ValueError(value)
                kwargs[key] = value.lower() == "true"
            else:
                kwargs[key] = value
        except ValueError:
            raise ValidationError(
                f"config line {lineno}: bad {types[key]} value {value!r} for {key}"
            ) from None
    cfg = TrainConfig(**kwargs)
    cfg.validate()
    return cfg


# ----- learning-rate schedule -----


def lr_at_step(step: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to peak_lr at warmup_steps, then cosine decay to 0 at
    total_steps.  Continuous, and non-increasing after the peak."""
    if not 0 <= warmup_steps <= total_steps:
        raise ValidationError("need 0 <= warmup_steps <= total_steps")
    if not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return peak_lr
    t = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * t))


# ----- sample and batch assembly -----


@dataclass
class Sample:
    original: Image
    view: Image  # what the model sees: composite, or the original when off
    spec: RotatedCropSpec
    layout: MaskLayout


@dataclass
class Batch:
    patches_in: torch.Tensor  # (B, N, D) from the view
    patches_tgt: torch.Tensor  # (B, N, D) from the original
    visible: torch.Tensor  # (B, V) long
    angle_flags: torch.Tensor  # (B, V) bool
    is_visible: torch.Tensor  # (B, N) bool
    is_crop: torch.Tensor  # (B, N) bool
    crop_idx: torch.Tensor  # (B, N_r) long
    samples: list[Sample]


def make_sample(img: Image, cfg: TrainConfig, rng: np.random.Generator) -> Sample:
    h, w, _ = img.shape
    spec = sample_crop_spec(h, w, cfg.p, cfg.a, (cfg.theta_min, cfg.theta_max), rng)
    view = composite(img, spec) if cfg.use_scaling_center_crop else img
    crop_idx, bg_idx = split_indices(h, w, cfg.p, spec)
    if cfg.use_split_masking:
        layout = sample_mask(crop_idx, bg_idx, cfg.ratio_crop, cfg.ratio_bg, rng)
    else:
        layout = sample_mask_joint(crop_idx, bg_idx, cfg.ratio_bg, rng)
    return Sample(original=img, view=view, spec=spec, layout=layout)


def collate(samples: list[Sample], cfg: TrainConfig) -> Batch:
    """Stack samples; the count law gives every sample the same number of
    visible tokens, so no padding is needed."""
    n = cfg.model_config().n_patches
    pin, ptg, vis, flags, isv, isc, cidx = [], [], [], [], [], [], []
    for s in samples:
        pin.append(patchify(s.view, cfg.p))
        ptg.append(patchify(s.original, cfg.p))
        lay = s.layout
        vis.append(lay.visible_indices)
        flags.append(
            np.concatenate(
                [
                    np.ones(lay.crop_visible.size, dtype=bool),
                    np.zeros(lay.bg_visible.size, dtype=bool),
                ]
            )
        )
        v = np.zeros(n, dtype=bool)
        v[lay.visible_indices] = True
        isv.append(v)
        c = np.zeros(n, dtype=bool)
        c[lay.crop_indices] = True
        isc.append(c)
        cidx.append(lay.crop_indices)
    return Batch(
        patches_in=torch.from_numpy(np.stack(pin)).float(),
        patches_tgt=torch.from_numpy(np.stack(ptg)).float(),
        visible=torch.from_numpy(np.stack(vis)),
        angle_flags=torch.from_numpy(np.stack(flags)),
        is_visible=torch.from_numpy(np.stack(isv)),
        is_crop=torch.from_numpy(np.stack(isc)),
        crop_idx=torch.from_numpy(np.stack(cidx)),
        samples=samples,
    )


# ----- loss -----


@dataclass(frozen=True)
class LossReport:
    l_mse: float
    l_ot: float  # crop term: transport cost, or masked-crop MSE when OT is off
    l_rec: float

    def __post_init__(self):
        for name in ("l_mse", "l_ot", "l_rec"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise TrainingDiverged(f"{name} is {v}")


def _masked_patch_mse(
    preds: torch.Tensor, targets: torch.Tensor, select: torch.Tensor
) -> torch.Tensor:
    """Per-sample mean over selected patches and their elements, averaged
    over the batch; samples with nothing selected contribute 0."""
    per_patch = ((preds - targets) ** 2).mean(dim=-1)  # (B, N)
    w = select.to(per_patch.dtype)
    count = w.sum(dim=1)
    per_sample = (per_patch * w).sum(dim=1) / count.clamp(min=1.0)
    return per_sample.mean()


def crop_cost(preds: torch.Tensor, batch: Batch) -> torch.Tensor:
    """(B, Nr, Nr) transport costs: original crop patches (rows) against the
    predictions at every crop position (columns).  Stays in the graph."""
    d = preds.shape[-1]
    idx = batch.crop_idx.unsqueeze(-1).expand(-1, -1, d)
    tgt = torch.gather(batch.patches_tgt, 1, idx)  # (B, Nr, D)
    out = torch.gather(preds, 1, idx)
    diff = tgt.unsqueeze(2) - out.unsqueeze(1)
    return (diff * diff).mean(dim=-1)


def solve_plans(cost: torch.Tensor, cfg: TrainConfig) -> torch.Tensor:
    """Per-sample transport plans, solved in float64 outside the graph and
    returned as constants."""
    plans = []
    with torch.no_grad():
        for b in range(cost.shape[0]):
            c_np = cost[b].detach().double().numpy()
            if not np.all(np.isfinite(c_np)):
                raise TrainingDiverged("non-finite transport cost")
            prob = transport.make_problem(
                c_np,
                epsilon_rel=cfg.epsilon_rel,
                max_iters=cfg.sinkhorn_max_iters,
                tol=cfg.sinkhorn_tol,
            )
            plans.append(transport.sinkhorn_solve(prob).plan)
    return torch.from_numpy(np.stack(plans))


def compute_total_loss(
    preds: torch.Tensor,
    batch: Batch,
    cfg: TrainConfig,
    frozen_plan: torch.Tensor | None = None,
) -> tuple[torch.Tensor, LossReport]:
    masked = ~batch.is_visible
    if not cfg.use_ot_loss and not cfg.use_split_masking:
        # Single population: one mean over all masked patches (plain MAE).
        l_mse = _masked_patch_mse(preds, batch.patches_tgt, masked)
        l_crop = preds.new_zeros(())
    else:
        l_mse = _masked_patch_mse(preds, batch.patches_tgt, masked & ~batch.is_crop)
        if cfg.use_ot_loss:
            cost = crop_cost(preds, batch)
            plan = solve_plans(cost, cfg) if frozen_plan is None else frozen_plan
            l_crop = (cost * plan.to(cost.dtype)).sum(dim=(1, 2)).mean()
        else:
            l_crop = _masked_patch_mse(preds, batch.patches_tgt, masked & batch.is_crop)
    loss = l_mse + l_crop
    m, o = l_mse.detach().item(), l_crop.detach().item()
    return loss, LossReport(l_mse=m, l_ot=o, l_rec=m + o)


def frozen_loss_closure(model: AngleMaskedAutoencoder, batch: Batch, cfg: TrainConfig):
    """Deterministic scalar loss as a function of the model parameters with
    the transport plan solved once, at the current parameters, and held
    fixed.  This is the differentiation contract (the plan carries no
    gradient), and what finite differences must probe."""
    plan0 = None
    if cfg.use_ot_loss:
        with torch.no_grad():
            out0 = model(batch.patches_in, batch.visible, batch.angle_flags)
            plan0 = solve_plans(crop_cost(out0.predictions, batch), cfg)

    def loss_fn() -> torch.Tensor:
        out = model(batch.patches_in, batch.visible, batch.angle_flags)
        loss, _ = compute_total_loss(out.predictions, batch, cfg, frozen_plan=plan0)
        return loss

    return loss_fn


def batch_to(batch: Batch, dtype: torch.dtype) -> Batch:
    """Same batch with the floating tensors cast (gradcheck runs float64)."""
    return Batch(
        patches_in=batch.patches_in.to(dtype),
        patches_tgt=batch.patches_tgt.to(dtype),
        visible=batch.visible,
        angle_flags=batch.angle_flags,
        is_visible=batch.is_visible,
        is_crop=batch.is_crop,
        crop_idx=batch.crop_idx,
        samples=batch.samples,
    )


# ----- optimization -----


def make_optimizer(model: AngleMaskedAutoencoder, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=cfg.peak_lr,
        betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )


def train_step(
    model: AngleMaskedAutoencoder,
    optimizer: torch.optim.AdamW,
    batch: Batch,
    cfg: TrainConfig,
    step: int,
) -> LossReport:
    lr = lr_at_step(step, cfg.peak_lr, cfg.warmup_steps, cfg.steps)
    for group in optimizer.param_groups:
        group["lr"] = lr
    out = model(batch.patches_in, batch.visible, batch.angle_flags)
    loss, report = compute_total_loss(out.predictions, batch, cfg)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return report


@dataclass
class FitResult:
    out_dir: Path
    metrics_path: Path
    checkpoint_path: Path
    reports: list[LossReport]


def _load_training_images(cfg: TrainConfig, data_seed: int) -> list[Image]:
    if cfg.data_dir:
        images = load_dataset(cfg.data_dir)
    else:
        images = generate_synthetic(
            DatasetSpec(
                count=cfg.synth_count,
                size=cfg.image_size,
                channels=cfg.channels,
                seed=data_seed,
                shape_kind=cfg.synth_shape_kind,
            )
        )
    for img in images:
        if img.shape != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ValidationError(
                f"dataset image shape {img.shape} does not match config "
                f"{cfg.image_size}x{cfg.image_size}x{cfg.channels}"
            )
    return images


def fit(cfg: TrainConfig, out_dir: str | Path) -> FitResult:
    """Run the full schedule; writes metrics.csv, periodic checkpoints and
    checkpoint_final.bin (which also records the compositing settings), plus
    the resolved config for the record."""
    cfg.validate()
    torch.set_num_threads(1)  # keeps reductions deterministic across runs
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(cfg.seed)
    data_ss, *step_ss = root.spawn(cfg.steps + 1)
    images = _load_training_images(cfg, data_seed=int(data_ss.generate_state(1)[0]))
    model = build_model(cfg.model_config())
    optimizer = make_optimizer(model, cfg)
    (out / "config.txt").write_text(format_train_config(cfg))
    extras = {
        "a": cfg.a,
        "theta_min": cfg.theta_min,
        "theta_max": cfg.theta_max,
        "ratio_crop": cfg.ratio_crop,
        "ratio_bg": cfg.ratio_bg,
        "epsilon_rel": cfg.epsilon_rel,
        "sinkhorn_max_iters": cfg.sinkhorn_max_iters,
        "sinkhorn_tol": cfg.sinkhorn_tol,
        "use_scaling_center_crop": cfg.use_scaling_center_crop,
        "use_split_masking": cfg.use_split_masking,
        "use_ot_loss": cfg.use_ot_loss,
    }
    lines = [METRICS_HEADER]
    reports: list[LossReport] = []
    for step in range(cfg.steps):
        t0 = time.perf_counter()
        rng = np.random.default_rng(step_ss[step])
        picks = rng.integers(0, len(images), size=cfg.batch_size)
        batch = collate([make_sample(images[i], cfg, rng) for i in picks], cfg)
        try:
            report = train_step(model, optimizer, batch, cfg, step)
        except TrainingDiverged as e:
            raise TrainingDiverged(f"step {step}: {e}") from None
        reports.append(report)
        lr = lr_at_step(step, cfg.peak_lr, cfg.warmup_steps, cfg.steps)
        seconds = time.perf_counter() - t0
        lines.append(
            f"{step},{report.l_mse:.12e},{report.l_ot:.12e},"
            f"{report.l_rec:.12e},{lr:.12e},{seconds:.6f}"
        )
        if (step + 1) % cfg.checkpoint_every == 0 and step + 1 < cfg.steps:
            save_checkpoint(out / f"checkpoint_{step + 1:06d}.bin", model, extras)
    metrics_path = out / "metrics.csv"
    metrics_path.write_text("\n".join(lines) + "\n")
    final_path = out / "checkpoint_final.bin"
    save_checkpoint(final_path, model, extras)
    return FitResult(
        out_dir=out,
        metrics_path=metrics_path,
        checkpoint_path=final_path,
        reports=reports,
    )


# ----- reconstruction panel -----


def config_for_inference(config_map: dict[str, str], fallback: TrainConfig | None = None) -> TrainConfig:
    """TrainConfig for sampling crops/masks at reconstruction time, built
    from a checkpoint's config block."""
    base = fallback or TrainConfig()
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    kwargs = {}
    for name, kind in fields.items():
        if name not in config_map:
            continue
        raw = config_map[name]
        if kind == "int":
            kwargs[name] = int(raw)
        elif kind == "float":
            kwargs[name] = float(raw)
        elif kind == "bool":
            kwargs[name] = raw.strip().lower() in ("true", "1")
        else:
            kwargs[name] = raw
    return dataclasses.replace(base, **kwargs)


def reconstruct_panel(
    model: AngleMaskedAutoencoder,
    img: Image,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[Image, Sample]:
    """Four views side by side with 1px white separators:
    original | composite | masked input (masked patches mid-gray) |
    reconstruction of every patch.  Width is 4*W + 3."""
    h, w, c = img.shape
    mc = model.config
    if (h, w, c) != (mc.image_size, mc.image_size, mc.channels):
        raise ValidationError(
            f"image shape {img.shape} does not match the model "
            f"({mc.image_size}, {mc.image_size}, {mc.channels})"
        )
    sample = make_sample(img, cfg, rng)
    batch = collate([sample], cfg)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(batch.patches_in, batch.visible, batch.angle_flags)
    if was_training:
        model.train()
    preds = out.predictions.squeeze(0).double().numpy()
    recon = np.clip(unpatchify(preds, h, w, cfg.p), 0.0, 1.0)
    masked_patches = patchify(sample.view, cfg.p)
    lay = sample.layout
    hidden = np.concatenate([lay.crop_masked, lay.bg_masked])
    masked_patches[hidden] = 0.5
    masked_view = unpatchify(masked_patches, h, w, cfg.p)
    sep = np.ones((h, 1, c))
    panel = np.concatenate(
        [img, sep, sample.view, sep, masked_view, sep, recon], axis=1
    )
    return panel, sample
