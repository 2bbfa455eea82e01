"""Two-stage training, checkpoints and inference.

Stage one fits the geometric matcher; stage two freezes it and trains the
generator against the three discriminators. Run directories look like::

    <run>/config.snapshot     YAML dump of the TrainConfig
    <run>/losses.log          one JSON object per optimisation step
    <run>/ckpt_<epoch>.pt     Checkpoint archives
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import yaml

from . import data as D
from . import discriminators as disc
from . import metrics
from .generator import EMA, ContextGenerator, build_image_context
from .matcher import GeometricMatcher, bpgm_objective, loss_appearance, loss_shape, loss_vgg_bpgm

__all__ = [
    "ABLATIONS",
    "TrainConfig",
    "TOY_EMA_DECAY",
    "toy_config",
    "full_size_config",
    "load_config",
    "Checkpoint",
    "BpgmTrainer",
    "GanTrainer",
    "train_bpgm",
    "train_generator",
    "matcher_from_checkpoint",
    "TryOnPipeline",
    "infer",
]

log = logging.getLogger(__name__)

ABLATIONS = ("no_can", "no_bpgm", "no_discriminators", "no_ema")


@dataclasses.dataclass
class TrainConfig:
    """Hyperparameters and network sizes. Defaults are the desk-scale toy setup."""

    # optimisation (values from the original training recipe)
    lr_bpgm: float = 1e-4
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    betas: tuple[float, float] = (0.5, 0.999)
    lambda_shp: float = 1.0
    lambda_app: float = 1.0
    lambda_vgg: float = 0.1
    lambda_per: float = 10.0
    lambda_seg: float = 1.0
    lambda_mth: float = 1.0
    lambda_ptc: float = 1.0
    vgg_layer_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)
    per_layer_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)
    ema_decay: float = 0.9999
    epochs_bpgm: int = 30
    epochs_g: int = 100
    batch_size: int = 8
    d_steps: int = 1
    g_steps: int = 1
    seed: int = 0
    dtype: str = "float32"
    ckpt_every: int = 10

    # ablations
    no_can: bool = False
    no_bpgm: bool = False
    no_discriminators: bool = False
    no_ema: bool = False
    keep_clothing: bool = False

    # data / shapes
    height: int = 64
    width: int = 48
    seg_channels: int = 25
    body_channels: tuple[int, ...] = (D.TORSO,)
    patch_parts: tuple[int, ...] = D.PATCH_PARTS
    patch_size: int = 0  # 0 -> scaled from 32 px at 256 rows

    # networks
    bpgm_encoder_widths: tuple[int, ...] = (32, 64, 64)
    bpgm_regressor_widths: tuple[int, ...] = (64, 64, 32, 32)
    tps_grid: int = 3
    max_offset: float = 0.4
    gen_blocks: int = 6
    gen_up: int = 3
    gen_widths: tuple[int, ...] = (64, 64, 64, 64, 32, 16)
    gen_hidden: int = 32
    dseg_widths: tuple[int, ...] = (16, 32, 32, 32, 32, 32)
    dseg_down: int = 3
    dmth_widths: tuple[int, ...] = (16, 32, 32, 32, 32, 32)
    dmth_down: int = 3
    dptc_widths: tuple[int, ...] = (16, 32, 32, 32)
    dptc_down: int = 2
    extractor_seed: int = 0
    extractor_weights: str | None = None

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))
        for name in ("lr_bpgm", "lr_g", "lr_d"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)

    @property
    def effective_patch_size(self) -> int:
        return self.patch_size or disc.patch_size_for(self.resolution)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def dump(self, path: str | os.PathLike) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def load_config(path: str | os.PathLike | None = None, **overrides) -> TrainConfig:
    """Read a YAML key-value config; keyword overrides take precedence."""
    values = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: config must be a mapping of keys to values")
        values.update(loaded)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(values)


TOY_EMA_DECAY = 0.99


def toy_config(**overrides) -> TrainConfig:
    """Toy defaults with an EMA horizon that fits a few hundred generator steps.

    With the original 0.9999 decay the shadow weights of a 500-step toy run
    would still be about 95% of their initialization.
    """
    return TrainConfig(**{"ema_decay": TOY_EMA_DECAY, **overrides})


def full_size_config(**overrides) -> TrainConfig:
    """Full-size shapes at 256x192: five-stage encoders, 8x6 generator root."""
    base = dict(
        height=256, width=192,
        bpgm_encoder_widths=(64, 128, 256, 512, 512),
        bpgm_regressor_widths=(512, 256, 128, 64),
        gen_blocks=6, gen_up=5, gen_widths=(512, 512, 256, 128, 64, 32), gen_hidden=128,
        dseg_widths=(64, 128, 128, 256, 256, 256), dseg_down=5,
        dmth_widths=(32, 64, 128, 256, 256, 256), dmth_down=5,
        dptc_widths=(64, 128, 256, 256), dptc_down=3,
    )
    base.update(overrides)
    return TrainConfig(**base)


# --- builders --------------------------------------------------------------


def build_matcher(cfg: TrainConfig) -> GeometricMatcher:
    return GeometricMatcher(cfg.resolution, cfg.seg_channels, cfg.bpgm_encoder_widths, cfg.bpgm_regressor_widths,
                            cfg.tps_grid, cfg.max_offset)


def build_generator(cfg: TrainConfig) -> ContextGenerator:
    return ContextGenerator(cfg.resolution, cfg.seg_channels + 9, cfg.gen_blocks, cfg.gen_up, cfg.gen_widths,
                            cfg.gen_hidden, use_can=not cfg.no_can)


def build_discriminators(cfg: TrainConfig) -> nn.ModuleDict:
    return nn.ModuleDict({
        "seg": disc.SegmentationDiscriminator(cfg.seg_channels, cfg.dseg_widths, cfg.dseg_down),
        "mth": disc.MatchingDiscriminator(cfg.dmth_widths, cfg.dmth_down),
        "ptc": disc.PatchDiscriminator(cfg.dptc_widths, cfg.dptc_down),
    })


def _extractor(cfg: TrainConfig) -> metrics.FeatureExtractor:
    return metrics.load_extractor(cfg.extractor_weights, cfg.extractor_seed, cfg.torch_dtype)


# --- checkpoints -----------------------------------------------------------


def _canonical(obj):
    """Rebuild a checkpoint payload so that pickling depends on values only.

    Strings are interned and tensors get private storage, so object identity
    inherited from the live training state cannot change the archive bytes.
    """
    if isinstance(obj, str):
        return sys.intern(obj)
    if torch.is_tensor(obj):
        return obj.detach().clone(memory_format=torch.contiguous_format)
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_canonical(v) for v in obj)
    return obj


@dataclasses.dataclass
class Checkpoint:
    stage: str
    epoch: int
    config: dict
    networks: dict
    ema: dict | None = None
    optimizers: dict = dataclasses.field(default_factory=dict)
    step: int = 0

    @property
    def config_hash(self) -> str:
        return TrainConfig.from_dict(self.config).digest()

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        payload = {"stage": self.stage, "epoch": self.epoch, "config": self.config,
                   "config_hash": self.config_hash, "networks": self.networks, "ema": self.ema,
                   "optimizers": self.optimizers, "step": self.step}
        torch.save(_canonical(payload), buf)
        return buf.getvalue()

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def _from_raw(cls, raw: dict, source: str) -> "Checkpoint":
        try:
            ckpt = cls(raw["stage"], raw["epoch"], raw["config"], raw["networks"], raw["ema"], raw["optimizers"],
                       raw["step"])
        except (KeyError, TypeError) as exc:
            raise D.DataError(f"{source}: not a checkpoint archive ({exc})") from exc
        if raw.get("config_hash") != ckpt.config_hash:
            raise D.DataError(f"{source}: config hash mismatch")
        return ckpt

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        try:
            raw = torch.load(io.BytesIO(blob), map_location="cpu", weights_only=True)
        except (RuntimeError, EOFError) as exc:
            raise D.DataError(f"cannot decode checkpoint bytes: {exc}") from exc
        return cls._from_raw(raw, "<bytes>")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        try:
            raw = torch.load(Path(path), map_location="cpu", weights_only=True)
        except (OSError, RuntimeError, EOFError) as exc:
            raise D.DataError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls._from_raw(raw, str(path))

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)


class _RunLog:
    def __init__(self, run_dir: str | os.PathLike | None, cfg: TrainConfig, fresh: bool = True):
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.records: list[dict] = []
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            cfg.dump(self.run_dir / "config.snapshot")
            if fresh:
                (self.run_dir / "losses.log").write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.run_dir is not None:
            with open(self.run_dir / "losses.log", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def checkpoint(self, ckpt: Checkpoint) -> Path | None:
        if self.run_dir is None:
            return None
        return ckpt.save(self.run_dir / f"ckpt_{ckpt.epoch:03d}.pt")


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


# --- stage one -------------------------------------------------------------


class BpgmTrainer:
    """Optimises the geometric matcher on paired person/garment batches."""

    def __init__(self, cfg: TrainConfig, fx: metrics.FeatureExtractor | None = None):
        self.cfg = cfg
        _seed_everything(cfg.seed)
        self.matcher = build_matcher(cfg).to(cfg.torch_dtype)
        self.fx = fx if fx is not None else _extractor(cfg)
        self.optimizer = torch.optim.Adam(self.matcher.parameters(), lr=cfg.lr_bpgm, betas=cfg.betas)
        self.epoch = 0
        self.step = 0

    def losses(self, batch: dict):
        cfg = self.cfg
        _, c_w, m_w = self.matcher(batch["own_garment"], batch["seg"], batch["own_garment_mask"])
        shp = loss_shape(m_w, batch["m_c"])
        app = loss_appearance(c_w, batch["person"], batch["m_b"])
        vgg = loss_vgg_bpgm(c_w, batch["person"], batch["m_b"], self.fx, cfg.vgg_layer_weights)
        return bpgm_objective(shp, app, vgg, cfg.lambda_shp, cfg.lambda_app, cfg.lambda_vgg)

    def train_step(self, batch: dict) -> dict:
        self.matcher.train()
        report = self.losses(batch)
        self.optimizer.zero_grad(set_to_none=False)
        report.total.backward()
        self.optimizer.step()
        self.step += 1
        return report.as_floats()

    def batches(self, dataset: D.TryOnDataset, epoch: int) -> Iterable[dict]:
        return D.iterate_batches(dataset, self.cfg.batch_size, shuffle=True, seed=self.cfg.seed, epoch=epoch,
                                 body_channels=self.cfg.body_channels, dtype=self.cfg.torch_dtype)

    def run(self, dataset: D.TryOnDataset, epochs: int | None = None, run_dir=None,
            callback: Callable[[dict], None] | None = None) -> Checkpoint:
        epochs = self.cfg.epochs_bpgm if epochs is None else epochs
        runlog = _RunLog(run_dir, self.cfg, fresh=self.epoch == 0)
        for _ in range(epochs):
            for batch in self.batches(dataset, self.epoch):
                rec = {"stage": "bpgm", "epoch": self.epoch, "step": self.step, **self.train_step(batch)}
                runlog.write(rec)
                if callback:
                    callback(rec)
            self.epoch += 1
            log.info("bpgm epoch %d done, last total %.5f", self.epoch, runlog.records[-1]["total"])
            if self.epoch % self.cfg.ckpt_every == 0 or _ == epochs - 1:
                runlog.checkpoint(self.checkpoint())
        self.history = runlog.records
        return self.checkpoint()

    def checkpoint(self) -> Checkpoint:
        return Checkpoint("bpgm", self.epoch, self.cfg.to_dict(), {"bpgm": self.matcher.state_dict()},
                          None, {"bpgm": self.optimizer.state_dict()}, self.step)

    def load_checkpoint(self, ckpt: Checkpoint) -> None:
        self.matcher.load_state_dict(ckpt.networks["bpgm"])
        self.optimizer.load_state_dict(ckpt.optimizers["bpgm"])
        self.epoch = ckpt.epoch
        self.step = ckpt.step


def train_bpgm(cfg: TrainConfig, dataset: D.TryOnDataset, run_dir=None, epochs: int | None = None) -> Checkpoint:
    return BpgmTrainer(cfg).run(dataset, epochs, run_dir)


# --- stage two -------------------------------------------------------------


class GanTrainer:
    """Trains the generator (and discriminators) with the matcher frozen.

    Ablation flags in the config remove components at construction time:
    ``no_can`` builds plain batch-norm blocks, ``no_bpgm`` feeds the unwarped
    garment as the warped one, ``no_discriminators`` trains with the perceptual
    loss only and ``no_ema`` keeps no shadow generator.
    """

    def __init__(self, cfg: TrainConfig, matcher: GeometricMatcher | None = None,
                 fx: metrics.FeatureExtractor | None = None):
        self.cfg = cfg
        _seed_everything(cfg.seed + 1)
        dt = cfg.torch_dtype
        if cfg.no_bpgm:
            self.matcher = None
        else:
            if matcher is None:
                raise ValueError("a trained matcher is required unless no_bpgm is set")
            self.matcher = matcher.to(dt).eval().requires_grad_(False)
        self.generator = build_generator(cfg).to(dt)
        self.discriminators = None if cfg.no_discriminators else build_discriminators(cfg).to(dt)
        self.ema = None if cfg.no_ema else EMA(self.generator, cfg.ema_decay)
        self.fx = fx if fx is not None else _extractor(cfg)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=cfg.lr_g, betas=cfg.betas)
        self.opt_d = (torch.optim.Adam(self.discriminators.parameters(), lr=cfg.lr_d, betas=cfg.betas)
                      if self.discriminators is not None else None)
        self.epoch = 0
        self.step = 0

    # context ---------------------------------------------------------------

    @torch.no_grad()
    def warp_garment(self, garment: torch.Tensor, seg: torch.Tensor) -> torch.Tensor:
        if self.matcher is None:
            return garment
        self.matcher.eval()
        return self.matcher(garment, seg)[1]

    def context(self, batch: dict, garment_key: str = "own_garment"):
        c = batch[garment_key]
        c_w = self.warp_garment(c, batch["seg"])
        return build_image_context(batch["seg"], batch["person"], batch["m_c"], c, c_w, self.generator.n_levels,
                                   self.cfg.keep_clothing)

    # losses ----------------------------------------------------------------

    def _patches(self, img: torch.Tensor, seg: torch.Tensor, boxes=None):
        return disc.extract_patches(img, seg, self.cfg.patch_parts, self.cfg.effective_patch_size, boxes)

    def generator_losses(self, batch: dict, fake: torch.Tensor, garment_key: str = "own_garment") -> dict:
        cfg = self.cfg
        per = metrics.perceptual_loss(fake, batch["person"], self.fx, cfg.per_layer_weights)
        out = {"per": per}
        total = cfg.lambda_per * per
        if self.discriminators is not None:
            ds = self.discriminators
            seg = disc.gen_seg_loss(ds["seg"](fake), batch["seg"])
            mth = disc.gen_mth_loss(ds["mth"](fake, batch[garment_key]))
            ptc = disc.gen_ptc_loss(ds["ptc"](self._patches(fake, batch["seg"]).patches))
            out.update(seg=seg, mth=mth, ptc=ptc)
            total = total + cfg.lambda_seg * seg + cfg.lambda_mth * mth + cfg.lambda_ptc * ptc
        out["total"] = total
        return out

    def discriminator_losses(self, batch: dict, fake: torch.Tensor, garment_key: str = "own_garment") -> dict:
        ds = self.discriminators
        real = batch["person"]
        l_seg = disc.dseg_loss(ds["seg"](real), batch["seg"], ds["seg"](fake))
        garment = batch[garment_key]
        l_mth = disc.dmth_loss(ds["mth"](real, garment), ds["mth"](fake, garment))
        real_p = self._patches(real, batch["seg"])
        fake_p = self._patches(fake, batch["seg"], real_p)
        l_ptc = disc.dptc_loss(ds["ptc"](real_p.patches), ds["ptc"](fake_p.patches))
        return {"d_seg": l_seg, "d_mth": l_mth, "d_ptc": l_ptc, "d_total": l_seg + l_mth + l_ptc}

    # steps -----------------------------------------------------------------

    def train_step(self, batch: dict) -> dict:
        ic = self.context(batch)
        self.generator.train()
        record = {}
        if self.discriminators is not None:
            self.discriminators.train()
            self.discriminators.requires_grad_(True)
            for _ in range(self.cfg.d_steps):
                with torch.no_grad():
                    fake = self.generator(ic)
                d = self.discriminator_losses(batch, fake)
                self.opt_d.zero_grad(set_to_none=False)
                d["d_total"].backward()
                self.opt_d.step()
            record.update({k: float(v.detach()) for k, v in d.items()})
            self.discriminators.requires_grad_(False)
        for _ in range(self.cfg.g_steps):
            fake = self.generator(ic)
            g = self.generator_losses(batch, fake)
            self.opt_g.zero_grad(set_to_none=False)
            g["total"].backward()
            self.opt_g.step()
            if self.ema is not None:
                self.ema.update(self.generator)
        record.update({k: float(v.detach()) for k, v in g.items()})
        self.step += 1
        return record

    def batches(self, dataset: D.TryOnDataset, epoch: int) -> Iterable[dict]:
        return D.iterate_batches(dataset, self.cfg.batch_size, shuffle=True, seed=self.cfg.seed, epoch=epoch,
                                 body_channels=self.cfg.body_channels, dtype=self.cfg.torch_dtype)

    def run(self, dataset: D.TryOnDataset, epochs: int | None = None, run_dir=None,
            callback: Callable[[dict], None] | None = None) -> Checkpoint:
        epochs = self.cfg.epochs_g if epochs is None else epochs
        runlog = _RunLog(run_dir, self.cfg, fresh=self.epoch == 0)
        for k in range(epochs):
            for batch in self.batches(dataset, self.epoch):
                rec = {"stage": "generator", "epoch": self.epoch, "step": self.step, **self.train_step(batch)}
                runlog.write(rec)
                if callback:
                    callback(rec)
            self.epoch += 1
            log.info("generator epoch %d done, last total %.5f", self.epoch, runlog.records[-1]["total"])
            if self.epoch % self.cfg.ckpt_every == 0 or k == epochs - 1:
                runlog.checkpoint(self.checkpoint())
        self.history = runlog.records
        return self.checkpoint()

    # persistence -----------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        nets = {"generator": self.generator.state_dict()}
        if self.matcher is not None:
            nets["bpgm"] = self.matcher.state_dict()
        if self.discriminators is not None:
            nets["discriminators"] = self.discriminators.state_dict()
        opts = {"generator": self.opt_g.state_dict()}
        if self.opt_d is not None:
            opts["discriminators"] = self.opt_d.state_dict()
        return Checkpoint("generator", self.epoch, self.cfg.to_dict(), nets,
                          self.ema.state_dict() if self.ema is not None else None, opts, self.step)

    def load_checkpoint(self, ckpt: Checkpoint) -> None:
        self.generator.load_state_dict(ckpt.networks["generator"])
        self.opt_g.load_state_dict(ckpt.optimizers["generator"])
        if self.matcher is not None:
            self.matcher.load_state_dict(ckpt.networks["bpgm"])
        if self.discriminators is not None:
            self.discriminators.load_state_dict(ckpt.networks["discriminators"])
            self.opt_d.load_state_dict(ckpt.optimizers["discriminators"])
        if self.ema is not None:
            self.ema.load_state_dict(ckpt.ema)
        self.epoch = ckpt.epoch
        self.step = ckpt.step

    def pipeline(self, use_ema: bool = True) -> "TryOnPipeline":
        gen = self.ema.module if (use_ema and self.ema is not None) else self.generator
        return TryOnPipeline(self.cfg, self.matcher, gen)


def matcher_from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig | None = None) -> GeometricMatcher:
    cfg = cfg or ckpt.train_config
    m = build_matcher(cfg).to(cfg.torch_dtype)
    m.load_state_dict(ckpt.networks["bpgm"])
    return m.eval()


def train_generator(cfg: TrainConfig, dataset: D.TryOnDataset, bpgm: Checkpoint | None, run_dir=None,
                    epochs: int | None = None) -> Checkpoint:
    matcher = None if cfg.no_bpgm else matcher_from_checkpoint(bpgm, cfg)
    return GanTrainer(cfg, matcher).run(dataset, epochs, run_dir)


# --- inference -------------------------------------------------------------


class TryOnPipeline:
    """Matcher warp, context assembly and generator, in eval mode."""

    def __init__(self, cfg: TrainConfig, matcher: GeometricMatcher | None, generator: ContextGenerator):
        self.cfg = cfg
        self.matcher = matcher.eval() if matcher is not None else None
        self.generator = generator.eval()

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint | str | os.PathLike, use_ema: bool = True) -> "TryOnPipeline":
        if not isinstance(ckpt, Checkpoint):
            ckpt = Checkpoint.load(ckpt)
        if ckpt.stage != "generator":
            raise ValueError(f"inference needs a generator-stage checkpoint, got stage {ckpt.stage!r}")
        cfg = ckpt.train_config
        matcher = None if cfg.no_bpgm else matcher_from_checkpoint(ckpt, cfg)
        gen = build_generator(cfg).to(cfg.torch_dtype)
        gen.load_state_dict(ckpt.ema if (use_ema and ckpt.ema is not None) else ckpt.networks["generator"])
        return cls(cfg, matcher, gen)

    @torch.no_grad()
    def warp(self, garment: torch.Tensor, seg: torch.Tensor, garment_mask: torch.Tensor | None = None):
        if self.matcher is None:
            return garment, garment_mask
        _, c_w, m_w = self.matcher(garment, seg, garment_mask)
        return c_w, m_w

    @torch.no_grad()
    def __call__(self, batch: dict, garment_key: str = "garment") -> torch.Tensor:
        return self.run(batch, garment_key)["output"]

    @torch.no_grad()
    def run(self, batch: dict, garment_key: str = "garment") -> dict:
        dt = self.cfg.torch_dtype
        c = batch[garment_key].to(dt)
        seg = batch["seg"].to(dt)
        if tuple(c.shape[-2:]) != self.cfg.resolution or tuple(seg.shape[-2:]) != self.cfg.resolution:
            raise ValueError(f"inputs must be {self.cfg.resolution}, got garment {tuple(c.shape[-2:])} "
                             f"and segmentation {tuple(seg.shape[-2:])}")
        c_w, _ = self.warp(c, seg)
        ic = build_image_context(seg, batch["person"].to(dt), batch["m_c"].to(dt), c, c_w, self.generator.n_levels,
                                 self.cfg.keep_clothing)
        return {"person": batch["person"].to(dt), "garment": c, "warped": c_w, "output": self.generator(ic)}


def infer(ckpt: Checkpoint | str | os.PathLike | TryOnPipeline, sample: D.TryOnSample, garment: D.TryOnSample,
          use_ema: bool = True) -> torch.Tensor:
    """Try ``garment`` on ``sample``; returns a ``(3, H, W)`` image in [-1, 1]."""
    pipe = ckpt if isinstance(ckpt, TryOnPipeline) else TryOnPipeline.from_checkpoint(ckpt, use_ema)
    batch = D.collate([(sample, garment)], pipe.cfg.body_channels)
    return pipe(batch)[0]
