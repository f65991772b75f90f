"""Alternating mutual-learning training of the RGB and semantic branches.

Every step updates both critics on one mini-batch; every ``n_critic`` steps
both generators are updated on that same mini-batch, each using the other
branch's detached one-hot output as its consistency target.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch

from .config import ExperimentConfig
from .data import AttributeDataset, load_attribute_dataset, sample_target_labels
from .domain import ContractError, indices_to_one_hot, to_one_hot
from .losses import (
    TrainingDivergence,
    adv_loss_d,
    adv_loss_g,
    check_finite,
    cls_loss,
    discriminator_total,
    generator_total,
    gradient_penalty,
    rec_loss_rgb,
    rec_loss_seg,
    sc_loss_rgb,
    sc_loss_seg,
)
from .networks import build_discriminator, build_generator, save_network, set_requires_grad
from .parsing import ParserNet, load_parser, parse, save_parser, train_parser

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "step", "lr_g", "lr_d",
    "d_rgb/adv", "d_rgb/gp", "d_rgb/cls", "d_rgb/total",
    "d_seg/adv", "d_seg/gp", "d_seg/cls", "d_seg/total",
    "g_rgb/adv", "g_rgb/cls", "g_rgb/rec", "g_rgb/sc", "g_rgb/total",
    "g_seg/adv", "g_seg/cls", "g_seg/rec", "g_seg/sc", "g_seg/total",
)


def lr_schedule(config: ExperimentConfig, t: int) -> tuple[float, float]:
    """Learning rates ``(lr_g, lr_d)`` at step ``t``.

    Constant for the first half of training, then linear decay to zero
    (``linear``) or geometric decay reaching ``lr_floor`` at the last step
    (``exponential``).
    """
    total = config.iterations
    if not 0 <= t <= total:
        raise ContractError(f"step {t} outside [0, {total}]")
    half = total / 2
    rates = []
    for base in (config.lr_g, config.lr_d):
        if config.lr_schedule == "constant" or t <= half:
            rates.append(base)
        elif config.lr_schedule == "linear":
            rates.append(base * (1.0 - (t - half) / half))
        else:
            ratio = (config.lr_floor / base) ** (1.0 / half)
            rates.append(base * ratio ** (t - half))
    return rates[0], rates[1]


def _seed(base: int, stream: int) -> int:
    return base * 1000 + stream


@dataclass
class Batch:
    x: torch.Tensor
    y_src: torch.Tensor
    y_trg: torch.Tensor
    s_in: torch.Tensor | None = None
    index: torch.Tensor | None = None

    @property
    def y_diff(self) -> torch.Tensor:
        return self.y_trg - self.y_src

    def digest(self) -> str:
        h = hashlib.sha1(self.x.numpy().tobytes())
        h.update(self.y_trg.numpy().tobytes())
        return h.hexdigest()


class Branch:
    """One generator/critic pair with its optimisers and gradient-penalty RNG."""

    def __init__(self, modality: str, config: ExperimentConfig, seed: int, extra_in_channels: int = 0):
        c = config
        self.modality = modality
        self.G = build_generator(c.backbone, modality, c.n_a, c.resolution, seed=seed,
                                 extra_in_channels=extra_in_channels, **c.generator_kwargs())
        self.D = build_discriminator(c.backbone, modality, c.n_a, c.resolution, seed=seed + 1,
                                     **c.discriminator_kwargs())
        adam = dict(betas=(c.beta1, c.beta2), eps=c.adam_eps, weight_decay=c.weight_decay)
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=c.lr_g, **adam)
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=c.lr_d, **adam)
        self.rng = torch.Generator().manual_seed(seed + 2)
        self.weights = c.weights
        self.cls_form = c.cls_loss_form
        self.d_updates = 0
        self.g_updates = 0

    @property
    def tag(self) -> str:
        return self.modality

    def set_lr(self, lr_g: float, lr_d: float) -> None:
        for group in self.opt_g.param_groups:
            group["lr"] = lr_g
        for group in self.opt_d.param_groups:
            group["lr"] = lr_d

    def discriminator_step(self, real, g_input, y_src, y_diff, step=None) -> dict:
        w = self.weights
        self.G.train()
        with torch.no_grad():
            fake = self.G(g_input, y_diff)
        set_requires_grad(self.D, True)
        out_real = self.D(real)
        out_fake = self.D(fake)
        gp = gradient_penalty(self.D, real, fake, generator=self.rng)
        adv = adv_loss_d(out_real.adv, out_fake.adv, gp, w.lambda_gp)
        cls = cls_loss(out_real.cls, y_src, self.cls_form)
        total = discriminator_total(adv, cls, w)
        parts = {"adv": adv, "gp": gp, "cls": cls, "total": total}
        check_finite({f"d_{self.tag}/{k}": v for k, v in parts.items()}, step)
        self.opt_d.zero_grad(set_to_none=True)
        total.backward()
        self.opt_d.step()
        self.d_updates += 1
        return {f"d_{self.tag}/{k}": v.item() for k, v in parts.items()}

    def generator_losses(self, real, g_input, y_trg, y_diff):
        """Forward pass for a generator update: returns the translation and its loss terms."""
        self.G.train()
        set_requires_grad(self.D, False)
        fake = self.G(g_input, y_diff)
        rec = self.G(g_input, torch.zeros_like(y_diff))
        out = self.D(fake)
        parts = {
            "adv": adv_loss_g(out.adv),
            "cls": cls_loss(out.cls, y_trg, self.cls_form),
            "rec": rec_loss_rgb(real, rec) if self.modality == "rgb" else rec_loss_seg(real, rec),
        }
        return fake, parts

    def generator_step(self, parts: dict, sc=None, step=None) -> dict:
        parts = dict(parts)
        if sc is not None:
            parts["sc"] = sc
        total = generator_total(parts["adv"], parts["cls"], parts["rec"], parts.get("sc", 0.0), self.weights)
        parts["total"] = total
        check_finite({f"g_{self.tag}/{k}": v for k, v in parts.items()}, step)
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        set_requires_grad(self.D, True)
        self.g_updates += 1
        return {f"g_{self.tag}/{k}": float(v.detach()) if torch.is_tensor(v) else float(v)
                for k, v in parts.items()}

    def state_dict(self) -> dict:
        return {
            "G": self.G.state_dict(), "D": self.D.state_dict(),
            "opt_g": self.opt_g.state_dict(), "opt_d": self.opt_d.state_dict(),
            "rng": self.rng.get_state(), "d_updates": self.d_updates, "g_updates": self.g_updates,
        }

    def load_state_dict(self, state: dict) -> None:
        self.G.load_state_dict(state["G"])
        self.D.load_state_dict(state["D"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.rng.set_state(state["rng"])
        self.d_updates = state["d_updates"]
        self.g_updates = state["g_updates"]


@dataclass
class TrainState:
    config: ExperimentConfig
    rgb: Branch
    seg: Branch | None
    parser: ParserNet | None
    images: torch.Tensor | None          # preloaded training images, or None to read per batch
    labels: torch.Tensor
    train_index: torch.Tensor
    dataset: AttributeDataset | None = None
    rng: torch.Generator = field(default_factory=torch.Generator)
    step: int = 0
    perm: torch.Tensor | None = None
    cursor: int = 0
    history: list[dict] = field(default_factory=list)
    source_masks: torch.Tensor | None = None   # parser argmax per preloaded image (parser is fixed)

    @property
    def coupled(self) -> bool:
        return self.seg is not None


def init_state(config: ExperimentConfig, dataset: AttributeDataset, parser: ParserNet | None = None,
               preload: bool = True) -> TrainState:
    if dataset.resolution != config.resolution:
        raise ContractError(f"dataset resolution {dataset.resolution} != config resolution {config.resolution}")
    if list(dataset.names) != list(config.attributes):
        raise ContractError(f"dataset attributes {dataset.names} differ from config {config.attributes}")
    needs_parser = config.variant in ("secgan", "concat")
    if needs_parser and parser is None:
        raise ContractError(f"variant {config.variant!r} needs a parsing network")
    if parser is not None:
        if parser.resolution != config.resolution:
            raise ContractError("parser resolution does not match config resolution")
        parser.freeze()
    extra = 12 if config.variant == "concat" else 0
    rgb = Branch("rgb", config, _seed(config.seed, 10), extra_in_channels=extra)
    seg = Branch("seg", config, _seed(config.seed, 20)) if config.variant == "secgan" else None
    train_index = torch.from_numpy(dataset.indices("train")).long()
    if len(train_index) == 0:
        raise ContractError("training split is empty")
    images = dataset.load_images(train_index.numpy()) if preload else None
    source_masks = None
    if needs_parser and images is not None:
        source_masks = parse_indices(parser, images)
    return TrainState(
        config=config, rgb=rgb, seg=seg, parser=parser if needs_parser else None, images=images,
        labels=torch.from_numpy(dataset.labels).float()[train_index], train_index=train_index,
        dataset=dataset, rng=torch.Generator().manual_seed(_seed(config.seed, 1)),
        source_masks=source_masks,
    )


@torch.no_grad()
def parse_indices(parser: ParserNet, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Argmax segment index ``[N, H, W]`` of the parser output for each image."""
    out = [parse(parser, images[i:i + batch_size]).argmax(dim=1).to(torch.uint8)
           for i in range(0, len(images), batch_size)]
    return torch.cat(out)


def next_batch(state: TrainState) -> Batch:
    """Draw the next mini-batch (epoch-wise shuffled) and its target labels."""
    c = state.config
    n = len(state.train_index)
    bs = min(c.batch_size, n)
    if state.perm is None or state.cursor + bs > n:
        state.perm = torch.randperm(n, generator=state.rng)
        state.cursor = 0
    idx = state.perm[state.cursor:state.cursor + bs]
    state.cursor += bs
    if state.images is not None:
        x = state.images[idx]
    else:
        x = state.dataset.load_images(state.train_index[idx].numpy())
    y_src = state.labels[idx]
    y_trg = sample_target_labels(y_src, c.target_mode, generator=state.rng)
    s_in = None
    if state.source_masks is not None:
        s_in = indices_to_one_hot(state.source_masks[idx])
    elif state.parser is not None:
        with torch.no_grad():
            s_in = to_one_hot(parse(state.parser, x))
    return Batch(x, y_src, y_trg, s_in, idx)


def _rgb_input(state: TrainState, batch: Batch) -> torch.Tensor:
    if state.config.variant == "concat":
        return torch.cat([batch.x, batch.s_in], dim=1)
    return batch.x


def _divergence(state: TrainState, err: TrainingDivergence) -> TrainingDivergence:
    if state.config.run_dir:
        path = Path(state.config.run_dir) / "checkpoints" / f"diverged_{state.step:07d}.pt"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(state, path)
        err.snapshot = str(path)
    err.step = state.step
    return err


def train_step_d(state: TrainState, batch: Batch) -> dict:
    """One critic update per branch on ``batch``; generators are not updated."""
    state.step += 1
    record = {"step": state.step, "batch": batch.digest()}
    try:
        record.update(state.rgb.discriminator_step(batch.x, _rgb_input(state, batch), batch.y_src,
                                                   batch.y_diff, state.step))
        if state.seg is not None:
            record.update(state.seg.discriminator_step(batch.s_in, batch.s_in, batch.y_src,
                                                       batch.y_diff, state.step))
    except TrainingDivergence as err:
        raise _divergence(state, err) from None
    return record


def train_step_g(state: TrainState, batch: Batch) -> dict:
    """One generator update per branch on the same mini-batch as the preceding critic step."""
    c = state.config
    if state.step % c.n_critic:
        raise ContractError(f"generator step requested at step {state.step}, not a multiple of {c.n_critic}")
    record = {"step": state.step, "batch": batch.digest()}
    try:
        x_out, rgb_parts = state.rgb.generator_losses(batch.x, _rgb_input(state, batch), batch.y_trg, batch.y_diff)
        if state.seg is None:
            record.update(state.rgb.generator_step(rgb_parts, step=state.step))
            return record
        s_out, seg_parts = state.seg.generator_losses(batch.s_in, batch.s_in, batch.y_trg, batch.y_diff)
        parsed = parse(state.parser, x_out)
        sc_rgb = sc_loss_rgb(to_one_hot(s_out), parsed)
        sc_seg = sc_loss_seg(to_one_hot(parsed), s_out)
        record.update(state.rgb.generator_step(rgb_parts, sc_rgb, state.step))
        record.update(state.seg.generator_step(seg_parts, sc_seg, state.step))
    except TrainingDivergence as err:
        raise _divergence(state, err) from None
    return record


# --------------------------------------------------------------------------
# checkpoints and logs

def save_checkpoint(state: TrainState, path: str | Path) -> None:
    payload = {
        "step": state.step,
        "config": state.config.to_dict(),
        "rgb": state.rgb.state_dict(),
        "seg": state.seg.state_dict() if state.seg is not None else None,
        "rng": state.rng.get_state(),
        "perm": state.perm,
        "cursor": state.cursor,
    }
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(state: TrainState, path: str | Path) -> TrainState:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    state.step = ckpt["step"]
    state.rgb.load_state_dict(ckpt["rgb"])
    if state.seg is not None:
        state.seg.load_state_dict(ckpt["seg"])
    state.rng.set_state(ckpt["rng"])
    state.perm = ckpt["perm"]
    state.cursor = ckpt["cursor"]
    return state


def latest_checkpoint(run_dir: str | Path) -> Path | None:
    ckpts = sorted((Path(run_dir) / "checkpoints").glob("step_*.pt"))
    return ckpts[-1] if ckpts else None


class ScalarLog:
    """Append-only CSV of per-step scalars."""

    def __init__(self, path: Path, resume_step: int | None = None):
        self.path = path
        if resume_step is not None and path.exists():
            with path.open(newline="") as f:
                rows = [r for r in csv.DictReader(f) if int(r["step"]) <= resume_step]
            self._rewrite(rows)
        else:
            self._rewrite([])
        self.file = path.open("a", newline="")
        self.writer = csv.DictWriter(self.file, fieldnames=LOG_COLUMNS, extrasaction="ignore")

    def _rewrite(self, rows):
        with self.path.open("w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)

    def write(self, record: dict) -> None:
        self.writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in record.items()})

    def close(self) -> None:
        self.file.close()


def read_log(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f))


def _save_samples(state: TrainState, batch: Batch, path: Path) -> None:
    from .evaluation import save_image_grid

    with torch.no_grad():
        state.rgb.G.eval()
        x_out = state.rgb.G(_rgb_input(state, batch), batch.y_diff)
        state.rgb.G.train()
    save_image_grid([batch.x[:8], x_out[:8]], path)


# --------------------------------------------------------------------------

def parser_widths(config: ExperimentConfig) -> tuple[int, ...]:
    return tuple(config.parser_width * 2 ** i for i in range(4))


def prepare_parser(config: ExperimentConfig, dataset: AttributeDataset, run_dir: Path | None) -> ParserNet | None:
    """Parser for a run: the configured checkpoint, the run's own, or one trained on the dataset masks."""
    if config.variant == "baseline":
        return None
    if config.parser_path:
        return load_parser(config.parser_path, config.resolution)
    if run_dir is not None and (run_dir / "parser.pt").exists():
        return load_parser(run_dir / "parser.pt", config.resolution)
    if not dataset.has_masks:
        raise ContractError("no parser_path configured and the dataset has no masks to train one")
    log.info("training parser on %d masks", len(dataset.indices("train")))
    parser = train_parser(dataset.image_tensor("train"), dataset.mask_tensor("train"),
                          epochs=config.parser_epochs, widths=parser_widths(config), seed=_seed(config.seed, 30))
    if run_dir is not None:
        save_parser(parser, run_dir / "parser.pt")
    return parser


def run_training(config: ExperimentConfig, dataset: AttributeDataset | None = None,
                 parser: ParserNet | None = None, resume: str | Path | bool | None = None,
                 stop_at: int | None = None, on_step: Callable[[dict], None] | None = None) -> TrainState:
    """Train for ``config.iterations`` critic steps, one generator step every ``n_critic``.

    ``resume`` is a checkpoint path, or ``True`` for the latest checkpoint in
    ``config.run_dir``. ``stop_at`` ends the run early (as if interrupted)
    after that step, leaving a checkpoint behind.
    """
    run_dir = Path(config.run_dir) if config.run_dir else None
    if dataset is None:
        if not config.data_root:
            raise ContractError("config.data_root is empty and no dataset was given")
        dataset = load_attribute_dataset(config.data_root, config.attributes, config.split,
                                         config.resolution, config.crop_size or None)
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    if parser is None:
        parser = prepare_parser(config, dataset, run_dir)
    elif run_dir is not None and not (run_dir / "parser.pt").exists():
        save_parser(parser, run_dir / "parser.pt")
    state = init_state(config, dataset, parser)
    if config.iterations == 0:
        return state

    if resume is True:
        resume = latest_checkpoint(run_dir) if run_dir else None
    if resume:
        load_checkpoint(state, resume)
        log.info("resumed from %s at step %d", resume, state.step)
    scalar_log = None
    if run_dir is not None:
        if not (run_dir / "config.yaml").exists():
            config.save(run_dir / "config.yaml")
        scalar_log = ScalarLog(run_dir / "log.csv", resume_step=state.step if resume else None)

    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    try:
        while state.step < end:
            t = state.step + 1
            lr_g, lr_d = lr_schedule(config, t)
            for branch in (state.rgb, state.seg):
                if branch is not None:
                    branch.set_lr(lr_g, lr_d)
            batch = next_batch(state)
            record = train_step_d(state, batch)
            if t % config.n_critic == 0:
                record.update(train_step_g(state, batch))
            record.update(lr_g=lr_g, lr_d=lr_d)
            state.history.append(record)
            if scalar_log is not None and t % config.log_every == 0:
                scalar_log.write(record)
            if on_step is not None:
                on_step(record)
            if run_dir is not None:
                if config.sample_every and t % config.sample_every == 0:
                    (run_dir / "samples").mkdir(exist_ok=True)
                    _save_samples(state, batch, run_dir / "samples" / f"step_{t:07d}.png")
                if t % config.checkpoint_every == 0 or t == end:
                    save_checkpoint(state, run_dir / "checkpoints" / f"step_{t:07d}.pt")
            if t % 500 == 0:
                log.info("step %d %s", t, {k: round(v, 4) for k, v in record.items()
                                          if isinstance(v, float) and not math.isnan(v)})
    finally:
        if scalar_log is not None:
            scalar_log.close()

    if run_dir is not None and state.step == config.iterations:
        save_network(state.rgb.G, run_dir / "G_rgb.pt")
        if state.seg is not None:
            save_network(state.seg.G, run_dir / "G_seg.pt")
    return state


def parameter_digest(net: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in net.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()
