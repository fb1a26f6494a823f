"""Patch image encoder and the image/trajectory fusion variants.

Variants (config key ``fusion``):

* ``baseline``  camera image only
* ``concat``    two unshared encoders, tokens stacked (image tokens first)
* ``overlay``   trajectory painted onto the camera image, one encoder
* ``xattn``     two encoders fused by cross-attention; ``xattn_query`` picks
                which side supplies the queries
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from trajcap.nn import CrossAttentionBlock, LayerNorm, Linear, Module, SelfAttentionBlock, normal_param
from trajcap.raster import RgbImage, overlay
from trajcap.tensor import Tensor, add, broadcast_to, concat

FUSIONS = ("baseline", "concat", "overlay", "xattn")
QUERY_SOURCES = ("image", "trajectory")

PIXEL_MEAN = 0.5
PIXEL_STD = 0.5

# ViT-g/14 at 224 px, as used by the BLIP-2 vision tower
PAPER_IMAGE_SIZE = 224
PAPER_PATCH = 14
PAPER_DIM = 1408


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch: int = 16
    dim: int = 64
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.image_size % self.patch:
            raise FusionError(f"patch {self.patch} does not divide image size {self.image_size}")
        if self.dim % self.heads:
            raise FusionError(f"dim {self.dim} is not divisible by {self.heads} heads")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    def to_dict(self):
        return asdict(self)


def token_count(image_size: int, patch: int) -> int:
    """Encoder output length: one token per patch plus CLS."""
    if image_size % patch:
        raise FusionError(f"patch {patch} does not divide image size {image_size}")
    return (image_size // patch) ** 2 + 1


def fused_shape(fusion: str, n_img: int, n_traj: int, dim: int, xattn_query: str = "image"):
    """Shape of the fused feature matrix without instantiating any weights."""
    if fusion in ("baseline", "overlay"):
        return (n_img, dim)
    if fusion == "concat":
        return (n_img + n_traj, dim)
    if fusion == "xattn":
        _check_query(xattn_query)
        return (n_img if xattn_query == "image" else n_traj, dim)
    raise FusionError(f"unknown fusion {fusion!r}")


def paper_concat_shape() -> tuple[int, int]:
    n = token_count(PAPER_IMAGE_SIZE, PAPER_PATCH)
    return fused_shape("concat", n, n, PAPER_DIM)


def _check_query(q):
    if q not in QUERY_SOURCES:
        raise FusionError(f"unknown query source {q!r}; expected one of {QUERY_SOURCES}")


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """uint8 [B, H, W, 3] -> standardized float [B, n_patches, patch * patch * 3]."""
    if pixels.ndim == 3:
        pixels = pixels[None]
    b, h, w, c = pixels.shape
    x = (pixels.astype(np.float64) / 255.0 - PIXEL_MEAN) / PIXEL_STD
    x = x.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


class ImageEncoder(Module):
    """patches -> linear embed -> [CLS] + positions -> pre-LN blocks -> final LN."""

    def __init__(self, rng: np.random.Generator, cfg: EncoderConfig):
        self.cfg = cfg
        d = cfg.dim
        self.patch_embed = Linear(rng, cfg.patch * cfg.patch * 3, d)
        self.cls = normal_param(rng, 1, d)
        self.pos = normal_param(rng, cfg.n_tokens, d)
        self.blocks = [SelfAttentionBlock(rng, d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(d)

    def forward_patches(self, patches: Tensor) -> Tensor:
        b = patches.shape[0]
        x = self.patch_embed(patches)
        cls = broadcast_to(self.cls, (b, 1, self.cfg.dim))
        x = add(concat([cls, x], axis=1), self.pos)
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def __call__(self, pixels: np.ndarray) -> Tensor:
        s = self.cfg.image_size
        if pixels.shape[-3:] != (s, s, 3):
            raise FusionError(f"encoder expects {s}x{s}x3 images, got {pixels.shape[-3:]}")
        out = self.forward_patches(Tensor(patchify(pixels, self.cfg.patch)))
        assert out.shape[1:] == (self.cfg.n_tokens, self.cfg.dim)
        return out


def encode_image(img: RgbImage, enc: ImageEncoder) -> Tensor:
    """Encode one image into [(H/p)^2 + 1, d] tokens."""
    out = enc(img.pixels)
    return out.reshape(out.shape[1:])


@dataclass
class FusedFeatures:
    tokens: Tensor
    kind: str  # concatenated | overlaid | cross_attention | image_only
    n_img: int
    n_traj: int

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[-2]


def _check_dims(f_img: Tensor, f_traj: Tensor):
    if f_img.shape[-1] != f_traj.shape[-1]:
        raise FusionError(f"feature dims differ: image {f_img.shape[-1]} vs trajectory {f_traj.shape[-1]}")


def fuse_concatenated(f_img: Tensor, f_traj: Tensor) -> FusedFeatures:
    _check_dims(f_img, f_traj)
    tokens = concat([f_img, f_traj], axis=f_img.ndim - 2)
    n_img, n_traj = f_img.shape[-2], f_traj.shape[-2]
    assert tokens.shape[-2] == n_img + n_traj
    return FusedFeatures(tokens, "concatenated", n_img, n_traj)


def fuse_overlaid(camera_img: RgbImage, traj_img: RgbImage, enc: ImageEncoder) -> FusedFeatures:
    tokens = encode_image(overlay(camera_img, traj_img), enc)
    assert tokens.shape[-2] == enc.cfg.n_tokens
    return FusedFeatures(tokens, "overlaid", tokens.shape[-2], 0)


class CrossAttentionFusion(Module):
    """Stack of pre-LN cross-attention blocks followed by a final LN."""

    def __init__(self, rng, d: int, heads: int, layers: int = 2, mlp_ratio: int = 4):
        self.blocks = [CrossAttentionBlock(rng, d, heads, mlp_ratio) for _ in range(layers)]
        self.ln_f = LayerNorm(d)

    def __call__(self, queries: Tensor, memory: Tensor) -> Tensor:
        x = queries
        for block in self.blocks:
            x = block(x, memory)
        return self.ln_f(x)


def fuse_cross_attention(f_img: Tensor, f_traj: Tensor, query_source: str,
                         xattn: CrossAttentionFusion) -> FusedFeatures:
    _check_dims(f_img, f_traj)
    _check_query(query_source)
    if query_source == "image":
        q, kv = f_img, f_traj
    else:
        q, kv = f_traj, f_img
    tokens = xattn(q, kv)
    assert tokens.shape[-2] == q.shape[-2]
    return FusedFeatures(tokens, "cross_attention", f_img.shape[-2], f_traj.shape[-2])


def overlay_pixels(cam: np.ndarray, traj: np.ndarray) -> np.ndarray:
    """Batched pixel-array version of ``raster.overlay``."""
    mask = np.any(traj != 0, axis=-1, keepdims=True)
    return np.where(mask, traj, cam)


class FusionEncoder(Module):
    """Image-trajectory encoder for one fusion variant.

    ``__call__`` takes uint8 pixel batches [B, H, W, 3] and returns the fused
    token matrix [B, n, d].
    """

    def __init__(self, rng, cfg: EncoderConfig, fusion: str, xattn_query: Optional[str] = None,
                 xattn_layers: int = 2):
        if fusion not in FUSIONS:
            raise FusionError(f"unknown fusion {fusion!r}; expected one of {FUSIONS}")
        if fusion == "xattn":
            xattn_query = xattn_query or "image"
            _check_query(xattn_query)
        elif xattn_query is not None and fusion == "baseline":
            raise FusionError("fusion=baseline takes no xattn_query")
        self.cfg = cfg
        self.fusion = fusion
        self.xattn_query = xattn_query if fusion == "xattn" else None
        self.cam_encoder = ImageEncoder(rng, cfg)
        self.traj_encoder = ImageEncoder(rng, cfg) if fusion in ("concat", "xattn") else None
        self.xattn = (CrossAttentionFusion(rng, cfg.dim, cfg.heads, xattn_layers, cfg.mlp_ratio)
                      if fusion == "xattn" else None)

    @property
    def n_tokens(self) -> int:
        n = self.cfg.n_tokens
        return fused_shape(self.fusion, n, n, self.cfg.dim, self.xattn_query or "image")[0]

    def fuse(self, cam_px: np.ndarray, traj_px: Optional[np.ndarray]) -> FusedFeatures:
        if self.fusion == "baseline":
            f = self.cam_encoder(cam_px)
            out = FusedFeatures(f, "image_only", f.shape[-2], 0)
        else:
            if traj_px is None:
                raise FusionError(f"fusion={self.fusion} needs a trajectory image")
            if traj_px.shape != cam_px.shape:
                raise FusionError(f"camera {cam_px.shape} and trajectory {traj_px.shape} batches differ")
            if self.fusion == "overlay":
                f = self.cam_encoder(overlay_pixels(cam_px, traj_px))
                out = FusedFeatures(f, "overlaid", f.shape[-2], 0)
            elif self.fusion == "concat":
                out = fuse_concatenated(self.cam_encoder(cam_px), self.traj_encoder(traj_px))
            else:
                out = fuse_cross_attention(self.cam_encoder(cam_px), self.traj_encoder(traj_px),
                                           self.xattn_query, self.xattn)
        assert out.n_tokens == self.n_tokens, (out.n_tokens, self.n_tokens)
        return out

    def __call__(self, cam_px, traj_px=None) -> Tensor:
        return self.fuse(cam_px, traj_px).tokens
