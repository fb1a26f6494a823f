"""Q-Former-lite bridge, causal caption decoder, greedy decoding, and training."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from trajcap.encoders import EncoderConfig, FusionEncoder
from trajcap.geometry import CameraModel, TrajectoryPlan
from trajcap.metrics import detokenize, tokenize
from trajcap.nn import (
    Adam, CrossAttentionBlock, LayerNorm, Linear, MLP, Module, MultiHeadAttention,
    load_checkpoint, normal_param, save_checkpoint,
)
from trajcap.raster import RgbImage, render_trajectory_image
from trajcap.tensor import (
    Tensor, add, backward, broadcast_to, cross_entropy, embedding, matmul, no_grad, take_rows,
    transpose,
)

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
MAX_LEN = 32

FREEZE_PRESETS = ("none", "paper-freeze", "frozen-backbone", "freeze-all")


class CaptionError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise CaptionError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        """BOS + token ids + EOS."""
        return [BOS] + [self.stoi.get(t, UNK) for t in tokenize(text)] + [EOS]

    def decode(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.itos[i])
        return detokenize(words)

    def to_list(self) -> list[str]:
        return list(self.itos[len(RESERVED):])


def build_vocab(captions: Sequence[str]) -> Vocab:
    """Tokens ordered by descending frequency, ties lexicographic, after the reserved ids."""
    if not captions:
        raise CaptionError("cannot build a vocabulary from an empty corpus")
    counts = Counter(t for c in captions for t in tokenize(c))
    return Vocab(sorted(counts, key=lambda t: (-counts[t], t)))


@dataclass
class ModelConfig:
    fusion: str = "xattn"
    xattn_query: Optional[str] = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    xattn_layers: int = 2
    n_queries: int = 8
    qformer_layers: int = 2
    d_dec: int = 64
    dec_layers: int = 2
    dec_heads: int = 4
    max_len: int = MAX_LEN

    def __post_init__(self):
        if self.n_queries < 1:
            raise CaptionError(f"need at least one query token, got {self.n_queries}")
        if not 1 <= self.max_len <= MAX_LEN:
            raise CaptionError(f"max_len must be in [1, {MAX_LEN}], got {self.max_len}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d.get("encoder", {}))
        return cls(**d)


class QFormerBlock(Module):
    """Learned queries: self-attention, cross-attention into the fused features, MLP."""

    def __init__(self, rng, d, heads):
        self.ln_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(rng, d, heads)
        self.cross = CrossAttentionBlock(rng, d, heads)

    def __call__(self, q, features):
        q = q + self.self_attn(self.ln_self(q))
        return self.cross(q, features)


class DecoderBlock(Module):
    def __init__(self, rng, d, heads):
        self.ln1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(rng, d, heads)
        self.ln2 = LayerNorm(d)
        self.ln_mem = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(rng, d, heads)
        self.ln3 = LayerNorm(d)
        self.mlp = MLP(rng, d, 4 * d)

    def __call__(self, x, memory):
        x = x + self.self_attn(self.ln1(x), causal=True)
        x = x + self.cross_attn(self.ln2(x), self.ln_mem(memory))
        return x + self.mlp(self.ln3(x))


class CaptionModel(Module):
    """fusion encoder -> Q-Former-lite -> projection -> causal decoder.

    The output head is ``(LN(h) @ W_out) @ E^T`` with ``E`` the token
    embedding; ``W_out`` starts at zero so initial logits are uniform.
    """

    def __init__(self, cfg: ModelConfig, vocab: Vocab, camera: Optional[CameraModel] = None, seed: int = 0):
        self.cfg = cfg
        self.vocab = vocab
        self.camera = camera or CameraModel.forward_facing(width=cfg.encoder.image_size,
                                                          height=cfg.encoder.image_size)
        rng = np.random.default_rng(seed)
        d = cfg.encoder.dim
        self.fusion = FusionEncoder(rng, cfg.encoder, cfg.fusion, cfg.xattn_query, cfg.xattn_layers)
        self.query_tokens = normal_param(rng, cfg.n_queries, d)
        self.qformer = [QFormerBlock(rng, d, cfg.encoder.heads) for _ in range(cfg.qformer_layers)]
        self.qformer_ln = LayerNorm(d)
        self.proj = Linear(rng, d, cfg.d_dec)
        self.tok_emb = normal_param(rng, len(vocab), cfg.d_dec)
        self.pos_emb = normal_param(rng, cfg.max_len, cfg.d_dec)
        self.decoder = [DecoderBlock(rng, cfg.d_dec, cfg.dec_heads) for _ in range(cfg.dec_layers)]
        self.ln_f = LayerNorm(cfg.d_dec)
        self.head = Linear(rng, cfg.d_dec, cfg.d_dec, bias=False, zero=True)

    # parameter groups for freeze presets
    def group_of(self, name: str) -> str:
        if name.startswith(("fusion.cam_encoder", "fusion.traj_encoder")):
            return "encoder"
        if name.startswith("fusion.xattn"):
            return "fusion"
        if name.startswith(("query_tokens", "qformer")):
            return "qformer"
        if name.startswith(("proj", "head")):
            # the zero-init head must stay trainable whenever the projection is
            return "projection"
        return "decoder"

    def apply_freeze(self, preset: str) -> None:
        if preset not in FREEZE_PRESETS:
            raise CaptionError(f"unknown freeze preset {preset!r}; expected one of {FREEZE_PRESETS}")
        frozen_groups = {"none": set(), "paper-freeze": {"encoder", "decoder"},
                         "frozen-backbone": {"encoder", "qformer"},
                         "freeze-all": {"encoder", "fusion", "qformer", "projection", "decoder"}}[preset]
        for name, p in self.named_parameters():
            p.frozen = self.group_of(name) in frozen_groups

    def memory(self, cam_px: np.ndarray, traj_px: Optional[np.ndarray]) -> Tensor:
        """Projected query tokens [B, m, d_dec] that the decoder attends to."""
        feats = self.fusion(cam_px, traj_px)
        b = feats.shape[0]
        q = broadcast_to(self.query_tokens, (b,) + self.query_tokens.shape)
        for block in self.qformer:
            q = block(q, feats)
        return self.proj(self.qformer_ln(q))

    def logits(self, memory: Tensor, input_ids: np.ndarray) -> Tensor:
        t = input_ids.shape[1]
        if t > self.cfg.max_len:
            raise CaptionError(f"sequence of {t} positions exceeds max length {self.cfg.max_len}")
        x = add(embedding(self.tok_emb, input_ids), take_rows(self.pos_emb, t))
        for block in self.decoder:
            x = block(x, memory)
        return matmul(self.head(self.ln_f(x)), transpose(self.tok_emb))

    def loss(self, cam_px, traj_px, targets: np.ndarray) -> Tensor:
        """Teacher-forced mean token cross-entropy; PAD labels are masked out."""
        inputs, labels = targets[:, :-1], targets[:, 1:]
        logits = self.logits(self.memory(cam_px, traj_px), inputs)
        return cross_entropy(logits, labels, labels != PAD)

    def trajectory_pixels(self, plan: TrajectoryPlan) -> np.ndarray:
        return render_trajectory_image(plan, self.camera).pixels

    @property
    def needs_plan(self) -> bool:
        return self.cfg.fusion != "baseline"

    def greedy(self, cam_px: np.ndarray, traj_px: Optional[np.ndarray], max_len: Optional[int] = None):
        """Batched greedy decoding; returns one id list per image (without BOS/EOS)."""
        max_len = max_len or self.cfg.max_len
        with no_grad():
            mem = self.memory(cam_px, traj_px if self.needs_plan else None)
            b = cam_px.shape[0]
            seq = np.full((b, 1), BOS, dtype=np.int64)
            done = np.zeros(b, dtype=bool)
            out = [[] for _ in range(b)]
            for _ in range(max_len):
                step = self.logits(mem, seq).data[:, -1, :]
                nxt = step.argmax(axis=-1)  # first maximum = lowest id on ties
                for i in range(b):
                    if not done[i]:
                        if nxt[i] == EOS:
                            done[i] = True
                        else:
                            out[i].append(int(nxt[i]))
                if done.all() or seq.shape[1] >= self.cfg.max_len:
                    break
                seq = np.concatenate([seq, nxt[:, None]], axis=1)
        return out

    def predict(self, frames, batch_size: int = 64) -> list[str]:
        captions = []
        for start in range(0, len(frames), batch_size):
            cam = frames.cam_px[start:start + batch_size]
            traj = frames.traj_px[start:start + batch_size]
            for ids in self.greedy(cam, traj):
                captions.append(self.vocab.decode(ids))
        return captions


def encode_targets(vocab: Vocab, captions: Sequence[str], max_len: int = MAX_LEN) -> np.ndarray:
    seqs = [vocab.encode(c) for c in captions]
    longest = max(len(s) for s in seqs)
    if longest - 1 > max_len:
        raise CaptionError(f"caption of {longest - 2} tokens exceeds max length {max_len}")
    out = np.full((len(seqs), longest), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def forward_caption(model: CaptionModel, img: RgbImage, plan: Optional[TrajectoryPlan],
                    target: Sequence[int]) -> Tensor:
    target = np.asarray(target, dtype=np.int64)
    if target[0] != BOS:
        raise CaptionError("target must start with BOS")
    if EOS not in target:
        raise CaptionError("target must contain EOS")
    if len(target) - 1 > model.cfg.max_len:
        raise CaptionError(f"target of {len(target)} ids exceeds max length {model.cfg.max_len}")
    traj = None
    if model.needs_plan:
        if plan is None:
            raise CaptionError(f"fusion={model.cfg.fusion} requires a trajectory plan")
        traj = model.trajectory_pixels(plan)[None]
    return model.loss(img.pixels[None], traj, target[None])


def decode_greedy(model: CaptionModel, img: RgbImage, plan: Optional[TrajectoryPlan] = None) -> str:
    traj = model.trajectory_pixels(plan)[None] if (model.needs_plan and plan is not None) else None
    if model.needs_plan and traj is None:
        raise CaptionError(f"fusion={model.cfg.fusion} requires a trajectory plan")
    return model.vocab.decode(model.greedy(img.pixels[None], traj)[0])


# --- training ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Defaults are the recipe that separates the ambiguous pairs.

    Training the encoders and Q-Former from scratch on flat-shaded scenes
    collapses their outputs to a per-batch constant within a few dozen
    steps, so by default they stay at their random init and act as fixed
    feature extractors.
    """

    epochs: int = 10
    batch_size: int = 16
    lr: float = 1.5e-3
    freeze: str = "frozen-backbone"
    seed: int = 0


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)   # (epoch, split, loss)
    best_epoch: int = 0
    best_val: float = math.inf

    def losses(self, split="train") -> list[float]:
        return [loss for _, s, loss in self.rows if s == split]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "split", "loss"])
            for epoch, split, loss in self.rows:
                w.writerow([epoch, split, repr(loss)])


def mean_loss(model: CaptionModel, frames, targets: np.ndarray, batch_size: int = 64) -> float:
    """Token-weighted mean loss over a whole split, without building a graph."""
    total = count = 0.0
    with no_grad():
        for start in range(0, len(frames), batch_size):
            sl = slice(start, start + batch_size)
            tg = targets[sl]
            n = float((tg[:, 1:] != PAD).sum())
            loss = model.loss(frames.cam_px[sl], frames.traj_px[sl] if model.needs_plan else None, tg)
            total += loss.item() * n
            count += n
    return total / count


def train(model: CaptionModel, train_set, val_set=None, cfg: TrainConfig = TrainConfig(),
          out_dir=None) -> TrainLog:
    """Adam over seeded mini-batch permutations; keeps the best-validation weights.

    On return the model holds the best weights (or the final ones when there
    is no validation split).  With ``out_dir`` the best checkpoint, its
    sidecar and ``train_log.csv`` are written there.
    """
    if len(train_set) == 0:
        raise TrainingError("empty dataset")
    model.apply_freeze(cfg.freeze)
    targets = encode_targets(model.vocab, train_set.captions, model.cfg.max_len)
    val_targets = (encode_targets(model.vocab, val_set.captions, model.cfg.max_len)
                   if val_set is not None and len(val_set) else None)
    opt = Adam(model.named_parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    log_ = TrainLog()
    best_state = None
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(perm[start:start + cfg.batch_size])
            tg = targets[idx]
            tg = tg[:, : int((tg != PAD).sum(axis=1).max())]
            try:
                loss = model.loss(train_set.cam_px[idx],
                                  train_set.traj_px[idx] if model.needs_plan else None, tg)
                opt.zero_grad()
                backward(loss)
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch}, batch {batches}: {exc}") from exc
            opt.step()
            total += loss.item()
            batches += 1
        train_loss = total / batches
        log_.rows.append((epoch, "train", train_loss))
        msg = f"epoch {epoch}: train {train_loss:.4f}"
        if val_targets is not None:
            val_loss = mean_loss(model, val_set, val_targets)
            log_.rows.append((epoch, "val", val_loss))
            msg += f"  val {val_loss:.4f}"
            if val_loss < log_.best_val:
                log_.best_val, log_.best_epoch = val_loss, epoch
                best_state = model.state_dict()
        log.info(msg)
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        log_.best_epoch = cfg.epochs
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_model(model, out)
        log_.write_csv(out / "train_log.csv")
    return log_


# --- persistence ------------------------------------------------------------------------

CKPT_NAME = "model.ckpt"
SIDECAR_NAME = "model.json"


def save_model(model: CaptionModel, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.state_dict(), out / CKPT_NAME)
    sidecar = {"config": model.cfg.to_dict(), "vocab": model.vocab.to_list(),
               "camera": model.camera.to_dict()}
    (out / SIDECAR_NAME).write_text(json.dumps(sidecar, indent=1) + "\n")


def load_model(ckpt_dir) -> CaptionModel:
    d = Path(ckpt_dir)
    for name in (CKPT_NAME, SIDECAR_NAME):
        if not (d / name).is_file():
            raise CaptionError(f"missing checkpoint file {d / name}")
    try:
        sidecar = json.loads((d / SIDECAR_NAME).read_text())
        cfg = ModelConfig.from_dict(sidecar["config"])
        vocab = Vocab(sidecar["vocab"])
        cam = CameraModel.from_dict(sidecar["camera"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CaptionError(f"{d / SIDECAR_NAME}: corrupted sidecar ({exc})") from None
    model = CaptionModel(cfg, vocab, cam)
    try:
        model.load_state_dict(load_checkpoint(d / CKPT_NAME))
    except KeyError as exc:
        raise CaptionError(f"{d / CKPT_NAME} does not match its sidecar: {exc.args[0]}") from None
    return model
