"""Two-stage cloud-then-irradiance forecaster.

Stage 1 embeds past satellite frames and the full meteorological window
with separate encoders, injects meteo context into the satellite tokens by
cross-attention, and decodes future cloud cover plus future satellite
bands.  Stage 2 maps, lead by lead, clear-sky GHI, radiation-relevant meteo
channels and the stage-1 outputs to GHI.
"""

from __future__ import annotations

import os
import struct
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from ..errors import FormatError, ShapeError
from ..rng import rng_for
from . import autograd as ag
from .autograd import Tensor
from .layers import Module, PatchEmbed, PatchRecover, SwinStage, Linear, fuse, param, trunc_normal

GHI_SCALE = 1000.0
SAT_BANDS = 4
LOSS_WEIGHTS = {"sat": 1.0, "tcdc": 0.5, "ghi": 1.0}


@dataclass(frozen=True)
class ModelPreset:
    image: int = 32
    patch: int = 4
    window: int = 4
    embed_dim: int = 32
    heads: int = 2
    depth_enc: int = 2
    depth_dec: int = 1
    depth_stage2: int = 2
    c1: int = 3
    c2: int = 2
    stage2_channels: tuple = (0, 1)
    t_in_sat: int = 6
    t_bg: int = 30
    t_out: int = 24
    mlp_ratio: float = 4
    drop_path: float = 0.0
    patch_norm: bool = False
    # large eps keeps the network smooth near the all-zero attribution baseline
    norm_eps: float = 1.0
    shifted_windows: bool = True
    single_stage: bool = False

    def __post_init__(self):
        if self.image % self.patch:
            raise ShapeError(f"image {self.image} not divisible by patch {self.patch}")
        if self.tokens_per_side % self.window:
            raise ShapeError(f"token grid {self.tokens_per_side} not divisible by window {self.window}")
        if len(self.stage2_channels) != self.c2:
            raise ShapeError("stage2_channels must list c2 channel indices")

    @property
    def tokens_per_side(self):
        return self.image // self.patch

    @property
    def in_chans_env(self):
        return self.t_bg * self.c1

    @property
    def in_chans_sat(self):
        return self.t_in_sat * SAT_BANDS

    @property
    def out_chans_stage1(self):
        return self.t_out * (1 + SAT_BANDS + (1 if self.single_stage else 0))

    @property
    def in_chans_decoder(self):
        return 2 * self.embed_dim

    @property
    def in_chans_stage2(self):
        return 1 + self.c2 + 1 + SAT_BANDS

    out_chans_stage2 = 1


TOY_PRESET = ModelPreset()

PAPER_PRESET = ModelPreset(
    image=512,
    patch=8,
    window=16,
    embed_dim=256,
    heads=2,
    depth_enc=8,
    depth_dec=2,
    depth_stage2=8,
    c1=39,
    c2=11,
    stage2_channels=(2, 3, 4, 5, 23, 24, 25, 26, 27, 28, 29),
    drop_path=0.1,
    norm_eps=1e-5,
)


@dataclass
class ForecastBundle:
    tcdc_hat: np.ndarray  # T_out x 1 x H x W
    sat_hat: np.ndarray  # T_out x 4 x H x W
    ghi_hat: np.ndarray  # T_out x 1 x H x W, W m-2


def postprocess_ghi(ghi, clearsky):
    """Clamp at zero and zero out every cell whose clear-sky GHI is zero."""
    ghi = np.asarray(ghi)
    cs = np.asarray(clearsky).reshape(ghi.shape)
    return np.where(cs > 0, np.maximum(ghi, 0), 0).astype(ghi.dtype)


class TwoStageModel(Module):
    def __init__(self, preset: ModelPreset = TOY_PRESET, seed: int = 0):
        self.preset = preset
        self.seed = seed
        rng = rng_for(seed, "init-params")
        p, d, g = preset, preset.embed_dim, (preset.tokens_per_side,) * 2
        kw = dict(mlp_ratio=p.mlp_ratio, drop_path=p.drop_path, shifted=p.shifted_windows, eps=p.norm_eps)
        self.sat_embed = PatchEmbed(p.in_chans_sat, p.patch, d, g, rng, p.patch_norm, p.norm_eps)
        self.sat_encoder = SwinStage(d, p.depth_enc, p.heads, p.window, rng, **kw)
        self.env_embed = PatchEmbed(p.in_chans_env, p.patch, d, g, rng, p.patch_norm, p.norm_eps)
        self.env_encoder = SwinStage(d, p.depth_enc, p.heads, p.window, rng, **kw)
        self.w_q = param(trunc_normal(rng, (d, d)))
        self.w_k = param(trunc_normal(rng, (d, d)))
        self.w_v = param(np.zeros((d, d), np.float32))
        self.dec_in = Linear(p.in_chans_decoder, d, rng)
        self.decoder = SwinStage(d, p.depth_dec, p.heads, p.window, rng, **kw)
        self.stage1_head = PatchRecover(d, p.patch, p.out_chans_stage1, rng)
        if not p.single_stage:
            self.s2_embed = PatchEmbed(p.in_chans_stage2, p.patch, d, g, rng, p.patch_norm, p.norm_eps)
            self.s2_encoder = SwinStage(d, p.depth_stage2, p.heads, p.window, rng, **kw)
            self.s2_head = PatchRecover(d, p.patch, p.out_chans_stage2, rng)

    # -- stage 1 ---------------------------------------------------------------
    def stage1_forward(self, x_sat, x_bg):
        """Future cloud cover and satellite bands.

        ``x_sat`` is ``(B, 6, 4, H, W)`` and ``x_bg`` ``(B, 30, C1, H, W)``,
        both normalized.  Returns Tensors ``tcdc (B, T, 1, H, W)`` in [0, 1],
        ``sat (B, T, 4, H, W)`` and, for single-stage models, the direct GHI
        head ``(B, T, 1, H, W)`` in units of ``GHI_SCALE``.
        """
        p = self.preset
        x_sat, x_bg = _as_input(x_sat), _as_input(x_bg)
        b = x_sat.shape[0]
        if x_sat.shape[1:3] != (p.t_in_sat, SAT_BANDS):
            raise ShapeError(f"satellite input {x_sat.shape} does not match preset")
        if x_bg.shape[1:3] != (p.t_bg, p.c1):
            raise ShapeError(f"meteo input {x_bg.shape} does not match preset (t_bg={p.t_bg}, c1={p.c1})")
        h, w = x_sat.shape[-2:]
        if x_bg.shape[-2:] != (h, w):
            raise ShapeError("meteo input must be regridded to the satellite grid")
        z_sat = self.sat_encoder(self.sat_embed(ag.reshape(x_sat, (b, p.in_chans_sat, h, w))))
        z_bg = self.env_encoder(self.env_embed(ag.reshape(x_bg, (b, p.in_chans_env, h, w))))
        z = fuse(z_sat, z_bg, self.w_q, self.w_k, self.w_v)
        z = self.decoder(self.dec_in(z))
        out = self.stage1_head(z)
        per = p.out_chans_stage1 // p.t_out
        out = ag.reshape(out, (b, p.t_out, per, h, w))
        tcdc = ag.sigmoid(out[:, :, 0:1])
        sat = out[:, :, 1 : 1 + SAT_BANDS]
        ghi = out[:, :, 1 + SAT_BANDS :] if p.single_stage else None
        return tcdc, sat, ghi

    # -- stage 2 ---------------------------------------------------------------
    def stage2_forward(self, clearsky, x_bg_future, tcdc, sat):
        """GHI in units of ``GHI_SCALE`` for every lead, ``(B, T, 1, H, W)``.

        ``clearsky`` is ``(B, T, H, W)`` in W m-2; ``x_bg_future`` is
        ``(B, T, C2, H, W)``.
        """
        p = self.preset
        cs = np.asarray(clearsky, dtype=self.dtype)
        xb = _as_input(x_bg_future)
        b, t = cs.shape[:2]
        h, w = cs.shape[-2:]
        if xb.shape[:2] != (b, t) or tcdc.shape[:2] != (b, t) or sat.shape[:2] != (b, t):
            raise ShapeError("stage-2 inputs are not aligned on the lead-time axis")
        if xb.shape[2] != p.c2:
            raise ShapeError(f"expected {p.c2} stage-2 meteo channels, got {xb.shape[2]}")
        cs_t = Tensor((cs / GHI_SCALE)[:, :, None])
        x = ag.concat([cs_t, xb, tcdc, sat], axis=2)
        x = ag.reshape(x, (b * t, p.in_chans_stage2, h, w))
        y = self.s2_head(self.s2_encoder(self.s2_embed(x)))
        return ag.reshape(y, (b, t, 1, h, w))

    @property
    def dtype(self):
        return self.w_q.data.dtype

    def forward(self, batch):
        """Raw network outputs for a prepared batch (see ``data.make_batch``)."""
        p = self.preset
        tcdc, sat, ghi = self.stage1_forward(batch["x_sat"], batch["x_bg"])
        if not p.single_stage:
            xb = _as_input(batch["x_bg"])
            fut = xb[:, p.t_bg - p.t_out :, list(p.stage2_channels)]
            ghi = self.stage2_forward(batch["clearsky"], fut, tcdc, sat)
        return {"tcdc": tcdc, "sat": sat, "ghi": ghi}

    def predict(self, batch):
        """Postprocessed :class:`ForecastBundle` list, one per batch member."""
        out = self.forward(batch)
        ghi = out["ghi"].data.astype(np.float64) * GHI_SCALE
        cs = np.asarray(batch["clearsky"])
        bundles = []
        for i in range(ghi.shape[0]):
            bundles.append(
                ForecastBundle(
                    tcdc_hat=out["tcdc"].data[i].copy(),
                    sat_hat=out["sat"].data[i].copy(),
                    ghi_hat=postprocess_ghi(ghi[i], cs[i][:, None]).astype(np.float32),
                )
            )
        return bundles


def _as_input(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def combine_losses(components, weights=None):
    """Weighted sum of per-task losses (plain floats or Tensors)."""
    weights = LOSS_WEIGHTS if weights is None else weights
    total = None
    for key in ("sat", "tcdc", "ghi"):
        term = components[key] * weights[key] if isinstance(components[key], Tensor) else weights[key] * components[key]
        total = term if total is None else total + term
    return total


def multitask_loss(outputs, batch, weights=None):
    """Weighted MSE over satellite, cloud-cover and GHI targets.

    ``outputs`` are raw model Tensors; GHI is compared in units of
    ``GHI_SCALE``.  Returns ``(total, components)`` with Tensor components.
    """
    weights = LOSS_WEIGHTS if weights is None else weights
    targets = {
        "sat": batch["sat"],
        "tcdc": batch["tcdc"],
        "ghi": np.asarray(batch["ghi"]) / GHI_SCALE,
    }
    comps = {}
    for key, target in targets.items():
        pred = outputs[key]
        if pred.shape != np.shape(target):
            raise ShapeError(f"{key}: prediction {pred.shape} vs target {np.shape(target)}")
        comps[key] = ag.mse(pred, np.asarray(target, dtype=pred.dtype))
    return combine_losses(comps, weights), comps


def bundle_loss(bundle: ForecastBundle, truth: dict, weights=None):
    """Loss of a postprocessed bundle against numpy truth (float64)."""
    comps = {
        "sat": float(np.mean((bundle.sat_hat.astype(np.float64) - truth["sat"]) ** 2)),
        "tcdc": float(np.mean((bundle.tcdc_hat.astype(np.float64) - truth["tcdc"]) ** 2)),
        "ghi": float(np.mean(((bundle.ghi_hat.astype(np.float64) - truth["ghi"]) / GHI_SCALE) ** 2)),
    }
    return combine_losses(comps, weights), comps


# -- checkpoints ----------------------------------------------------------------

BLOCK_MAGIC = b"BGSP"
NAME_BYTES = 64


def save_checkpoint(model: TwoStageModel, directory, step=0, extra=None):
    """Write ``manifest.txt`` (key=value) and ``params.bin`` (named f32 blocks)."""
    os.makedirs(directory, exist_ok=True)
    manifest = {f"preset.{k}": v for k, v in asdict(model.preset).items()}
    manifest.update({"seed": model.seed, "step": step})
    manifest.update(extra or {})
    lines = "".join(f"{k}={_fmt(v)}\n" for k, v in manifest.items())
    _atomic_write(os.path.join(directory, "manifest.txt"), lines.encode())
    named = list(model.named_parameters())
    out = [BLOCK_MAGIC, struct.pack("<II", 1, len(named))]
    for name, t in named:
        out.append(name.encode("ascii").ljust(NAME_BYTES, b" "))
        out.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(t.data.astype("<f4").tobytes())
    _atomic_write(os.path.join(directory, "params.bin"), b"".join(out))


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _atomic_write(path, blob):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def _parse_preset(manifest):
    kwargs = {}
    for f in fields(ModelPreset):
        raw = manifest.get(f"preset.{f.name}")
        if raw is None:
            continue
        default = getattr(TOY_PRESET, f.name)
        if isinstance(default, bool):
            kwargs[f.name] = raw == "True"
        elif isinstance(default, tuple):
            kwargs[f.name] = tuple(int(x) for x in raw.split(",") if x)
        else:
            kwargs[f.name] = type(default)(float(raw)) if isinstance(default, int) else type(default)(raw)
    return replace(TOY_PRESET, **kwargs)


def read_manifest(directory):
    out = {}
    with open(os.path.join(directory, "manifest.txt")) as fh:
        for line in fh:
            if "=" in line:
                k, v = line.rstrip("\n").split("=", 1)
                out[k] = v
    return out


def load_checkpoint(directory) -> TwoStageModel:
    manifest = read_manifest(directory)
    model = TwoStageModel(_parse_preset(manifest), seed=int(manifest.get("seed", 0)))
    with open(os.path.join(directory, "params.bin"), "rb") as fh:
        blob = fh.read()
    if blob[:4] != BLOCK_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    _, count = struct.unpack_from("<II", blob, 4)
    off = 12
    params = dict(model.named_parameters())
    for _ in range(count):
        name = blob[off : off + NAME_BYTES].decode("ascii").rstrip(" ")
        off += NAME_BYTES
        (ndim,) = struct.unpack_from("<I", blob, off)
        shape = struct.unpack_from(f"<{ndim}I", blob, off + 4)
        off += 4 + 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        if off + 4 * n > len(blob):
            raise FormatError(f"truncated tensor {name}", off)
        arr = np.frombuffer(blob, "<f4", n, off).reshape(shape).astype(np.float32)
        off += 4 * n
        if name not in params or params[name].shape != arr.shape:
            raise FormatError(f"unexpected tensor {name} {arr.shape}", off)
        params[name].data = arr
    return model
