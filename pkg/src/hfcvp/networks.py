"""The three trainable components: hider, finder and combiner.

All forwards are mask-aware: activations at padded frames are zeroed after
every convolution so outputs on valid frames are identical whether a
sequence is run alone or inside a padded batch. Shapes are time-major,
(batch, frames, features).
"""

from __future__ import annotations

import base64
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .core import (
    EMBEDDING_DIM,
    MEL_BINS,
    DimensionError,
    TrainConfig,
    load_json,
    load_matrix,
    save_json,
    save_matrix,
)


@dataclass
class NetworkConfig:
    num_classes: int
    mel_bins: int = MEL_BINS
    embedding_dim: int = EMBEDDING_DIM
    # hider
    hider_channels: int = 128
    hider_kernel_sizes: tuple = (3, 7, 11)
    hider_dilations: tuple = (1, 3, 5)
    hider_io_kernel: int = 7
    leaky_slope: float = 0.1
    # finder
    finder_conv_channels: int = 2
    finder_conv_kernel: int = 9
    finder_gru_size: int = 200
    finder_gru_layers: int = 3
    finder_pooling: str = "last"  # "last" or "mean"
    # combiner
    combiner_dim: int = 384
    combiner_heads: int = 2
    combiner_layers: int = 4
    combiner_ffn_dim: int = 1536
    combiner_ffn_kernel: int = 3
    combiner_dropout: float = 0.1
    postnet_channels: int = 512
    postnet_layers: int = 5
    postnet_kernel: int = 5

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hider_kernel_sizes"] = list(self.hider_kernel_sizes)
        d["hider_dilations"] = list(self.hider_dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown NetworkConfig keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("hider_kernel_sizes", "hider_dilations"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def toy(cls, num_classes: int) -> "NetworkConfig":
        """Reduced sizes for CPU desk-scale experiments; same topology."""
        return cls(
            num_classes=num_classes,
            hider_channels=48,
            finder_gru_size=96,
            finder_gru_layers=2,
            combiner_dim=96,
            combiner_heads=2,
            combiner_layers=2,
            combiner_ffn_dim=192,
            combiner_dropout=0.1,
            postnet_channels=96,
            postnet_layers=3,
        )


def _check_input(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"{what}: non-finite input")


def _full_mask(x: torch.Tensor) -> torch.Tensor:
    return torch.ones(x.shape[0], x.shape[1], dtype=x.dtype, device=x.device)


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div[: (dim + 1) // 2])
    return table.to(dtype)


class ResidualConvBlock(nn.Module):
    """Dilated branch convolutions with residual adds, one kernel size per block."""

    def __init__(self, channels, kernel, dilations, slope):
        super().__init__()
        self.slope = slope
        self.convs1 = nn.ModuleList(
            weight_norm(
                nn.Conv1d(channels, channels, kernel, dilation=d, padding=(kernel - 1) * d // 2)
            )
            for d in dilations
        )
        self.convs2 = nn.ModuleList(
            weight_norm(nn.Conv1d(channels, channels, kernel, padding=(kernel - 1) // 2))
            for _ in dilations
        )

    def forward(self, x, m):
        for c1, c2 in zip(self.convs1, self.convs2):
            t = c1(F.leaky_relu(x, self.slope)) * m
            t = c2(F.leaky_relu(t, self.slope)) * m
            x = x + t
        return x


class Hider(nn.Module):
    """Maps a mel spectrogram to a same-length hidden representation."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        k = cfg.hider_io_kernel
        ch = cfg.hider_channels
        self.conv_in = weight_norm(nn.Conv1d(cfg.mel_bins, ch, k, padding=(k - 1) // 2))
        self.blocks = nn.ModuleList(
            ResidualConvBlock(ch, ks, cfg.hider_dilations, cfg.leaky_slope)
            for ks in cfg.hider_kernel_sizes
        )
        self.conv_out = weight_norm(nn.Conv1d(ch, cfg.mel_bins, k, padding=(k - 1) // 2))

    def forward(self, x, mask=None):
        # x: (B, T, mel_bins)
        _check_input(x, "hider")
        if mask is None:
            mask = _full_mask(x)
        m = mask.unsqueeze(1)  # (B, 1, T)
        y = x.transpose(1, 2) * m
        y = self.conv_in(y) * m
        for block in self.blocks:
            y = block(y, m)
        y = F.leaky_relu(y, self.cfg.leaky_slope)
        y = self.conv_out(y) * m
        return y.transpose(1, 2)


class Finder(nn.Module):
    """Adversary estimating the class distribution from a hidden representation."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        # convolution runs along the feature axis, per frame, valid padding
        self.conv = nn.Conv1d(1, cfg.finder_conv_channels, cfg.finder_conv_kernel)
        frame_feats = cfg.finder_conv_channels * (cfg.mel_bins - cfg.finder_conv_kernel + 1)
        self.gru = nn.GRU(
            frame_feats, cfg.finder_gru_size, cfg.finder_gru_layers, batch_first=True
        )
        self.head = nn.Linear(cfg.finder_gru_size, cfg.num_classes)

    def forward(self, h, mask=None):
        # h: (B, T, mel_bins) -> (B, num_classes) on the simplex
        _check_input(h, "finder")
        B, T, nf = h.shape
        x = h.reshape(B * T, 1, nf)
        x = self.conv(x).reshape(B, T, -1)
        if mask is None:
            lengths = torch.full((B,), T, dtype=torch.long)
        else:
            lengths = mask.sum(dim=1).long().cpu()
        packed = pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
        out, hn = self.gru(packed)
        if self.cfg.finder_pooling == "mean":
            padded, lens = pad_packed_sequence(out, batch_first=True)
            m = (
                torch.arange(padded.shape[1]).unsqueeze(0) < lens.unsqueeze(1)
            ).to(padded.dtype)
            feats = (padded * m.unsqueeze(-1)).sum(1) / lens.unsqueeze(1).to(padded.dtype)
        else:
            feats = hn[-1]
        return torch.softmax(self.head(feats), dim=-1)


class Postnet(nn.Module):
    """Convolutional refinement of the combiner output, residual around it."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        ch, k, n = cfg.postnet_channels, cfg.postnet_kernel, cfg.postnet_layers
        pad = (k - 1) // 2
        dims = [cfg.mel_bins] + [ch] * (n - 1) + [cfg.mel_bins]
        self.convs = nn.ModuleList(
            nn.Conv1d(dims[i], dims[i + 1], k, padding=pad) for i in range(n)
        )
        self.norms = nn.ModuleList(nn.BatchNorm1d(dims[i + 1]) for i in range(n))

    def forward(self, x, m):
        # x: (B, T, mel_bins), m: (B, 1, T)
        y = x.transpose(1, 2) * m
        last = len(self.convs) - 1
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            y = norm(conv(y)) * m
            if i != last:
                y = torch.tanh(y) * m
        return y.transpose(1, 2)


class TransformerLayer(nn.Module):
    """Post-norm self-attention block with a convolutional feed-forward."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        d, k = cfg.combiner_dim, cfg.combiner_ffn_kernel
        self.attn = nn.MultiheadAttention(
            d, cfg.combiner_heads, dropout=cfg.combiner_dropout, batch_first=True
        )
        self.conv1 = nn.Conv1d(d, cfg.combiner_ffn_dim, k, padding=(k - 1) // 2)
        self.conv2 = nn.Conv1d(cfg.combiner_ffn_dim, d, k, padding=(k - 1) // 2)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(cfg.combiner_dropout)

    def forward(self, x, pad_mask, m):
        # x: (B, T, d); pad_mask: bool (B, T), True at padding; m: (B, T, 1)
        a, _ = self.attn(x, x, x, key_padding_mask=pad_mask, need_weights=False)
        x = self.norm1(x + self.dropout(a)) * m
        mt = m.transpose(1, 2)
        y = F.relu(self.conv1(x.transpose(1, 2)) * mt)
        y = (self.conv2(y) * mt).transpose(1, 2)
        x = self.norm2(x + self.dropout(y)) * m
        return x


class Combiner(nn.Module):
    """Reconstructs a mel spectrogram from a hidden representation plus a
    speaker embedding; returns both the encoder output and the postnet-refined
    output."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.hidden_proj = nn.Linear(cfg.mel_bins, cfg.combiner_dim)
        self.embed_proj = nn.Linear(cfg.embedding_dim, cfg.combiner_dim)
        self.layers = nn.ModuleList(TransformerLayer(cfg) for _ in range(cfg.combiner_layers))
        self.out_proj = nn.Linear(cfg.combiner_dim, cfg.mel_bins)
        self.postnet = Postnet(cfg)

    def forward(self, h, embedding, mask=None):
        # h: (B, T, mel_bins); embedding: (B, 192) or (192,)
        _check_input(h, "combiner")
        embedding = torch.as_tensor(embedding, dtype=h.dtype, device=h.device)
        if embedding.dim() == 1:
            embedding = embedding.unsqueeze(0).expand(h.shape[0], -1)
        if embedding.shape[-1] != self.cfg.embedding_dim:
            raise DimensionError(
                f"speaker embedding must have {self.cfg.embedding_dim} features, "
                f"got {embedding.shape[-1]}"
            )
        if mask is None:
            mask = _full_mask(h)
        m = mask.unsqueeze(-1)  # (B, T, 1)
        pad = mask < 0.5
        x = self.hidden_proj(h) + self.embed_proj(embedding).unsqueeze(1)
        x = x + sinusoidal_positions(h.shape[1], self.cfg.combiner_dim, h.dtype).to(h.device)
        x = x * m
        for layer in self.layers:
            x = layer(x, pad, m)
        pre = self.out_proj(x) * m
        post = pre + self.postnet(pre, m.transpose(1, 2))
        post = post * m
        return pre, post


def count_parameters(module: nn.Module) -> int:
    """Number of trainable scalars."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def build_networks(cfg: NetworkConfig) -> dict:
    return {"hider": Hider(cfg), "finder": Finder(cfg), "combiner": Combiner(cfg)}


# ---------------------------------------------------------------------------
# checkpointing: manifest.json + one flat float32 container per network


def _flatten_state(module: nn.Module):
    index = []
    chunks = []
    for key, t in module.state_dict().items():
        a = t.detach().cpu().numpy()
        index.append({"key": key, "shape": list(a.shape), "dtype": str(a.dtype)})
        chunks.append(np.asarray(a, dtype=np.float32).ravel())
    vec = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float32)
    return vec, index


def _restore_state(module: nn.Module, vec: np.ndarray, index: list) -> None:
    state = {}
    pos = 0
    for entry in index:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        flat = vec[pos : pos + n].reshape(entry["shape"])
        pos += n
        if entry["dtype"].startswith("int") or entry["dtype"].startswith("uint"):
            arr = np.asarray(np.rint(flat), dtype=entry["dtype"])
        else:
            arr = np.asarray(flat, dtype=entry["dtype"])
        state[entry["key"]] = torch.from_numpy(np.ascontiguousarray(arr))
    if pos != vec.size:
        raise ValueError(f"parameter container size mismatch ({pos} != {vec.size})")
    module.load_state_dict(state)


def _optimizer_vec(opt: torch.optim.Optimizer):
    steps = []
    chunks = []
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if st:
                steps.append(float(st["step"]))
                chunks.append(st["exp_avg"].detach().cpu().numpy().ravel())
                chunks.append(st["exp_avg_sq"].detach().cpu().numpy().ravel())
            else:
                steps.append(0.0)
                z = np.zeros(p.numel(), dtype=np.float32)
                chunks.append(z)
                chunks.append(z)
    vec = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float32)
    return vec.astype(np.float32), steps


def _restore_optimizer(opt: torch.optim.Optimizer, vec: np.ndarray, steps: list) -> None:
    pos = 0
    i = 0
    for group in opt.param_groups:
        for p in group["params"]:
            n = p.numel()
            exp_avg = torch.from_numpy(vec[pos : pos + n].copy()).view_as(p)
            pos += n
            exp_avg_sq = torch.from_numpy(vec[pos : pos + n].copy()).view_as(p)
            pos += n
            if steps[i] > 0:
                opt.state[p] = {
                    "step": torch.tensor(float(steps[i])),
                    "exp_avg": exp_avg,
                    "exp_avg_sq": exp_avg_sq,
                }
            i += 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(
    out_dir,
    nets: dict,
    net_config: NetworkConfig,
    train_config: TrainConfig | None = None,
    epoch: int = 0,
    optimizers: dict | None = None,
    rng_state: bool = True,
) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "network_config": net_config.to_dict(),
        "num_classes": net_config.num_classes,
        "seed": train_config.seed if train_config else None,
        "epoch": epoch,
        "train_config": train_config.to_dict() if train_config else None,
        "params": {},
        "optimizers": {},
    }
    for name, net in nets.items():
        vec, index = _flatten_state(net)
        manifest["params"][name] = index
        save_matrix(out_dir / f"{name}.bin", vec)
    if optimizers:
        for name, opt in optimizers.items():
            vec, steps = _optimizer_vec(opt)
            manifest["optimizers"][name] = {"steps": steps}
            save_matrix(out_dir / f"opt_{name}.bin", vec)
    if rng_state:
        manifest["rng_torch"] = base64.b64encode(
            torch.get_rng_state().numpy().tobytes()
        ).decode("ascii")
    save_json(out_dir / "manifest.json", manifest)


def load_checkpoint(ckpt_dir, parts=("hider", "finder", "combiner")):
    """Rebuild the requested networks from a checkpoint directory.

    Returns (nets, net_config, manifest). Only the .bin files for the
    requested parts are read, so inference can run with the finder file
    absent.
    """
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    manifest = load_json(manifest_path)
    cfg = NetworkConfig.from_dict(manifest["network_config"])
    builders = {"hider": Hider, "finder": Finder, "combiner": Combiner}
    nets = {}
    for name in parts:
        bin_path = ckpt_dir / f"{name}.bin"
        if not bin_path.exists():
            raise CheckpointError(f"missing parameter container {bin_path}")
        net = builders[name](cfg)
        _restore_state(net, load_matrix(bin_path), manifest["params"][name])
        nets[name] = net
    return nets, cfg, manifest


def restore_rng(manifest: dict) -> None:
    if manifest.get("rng_torch"):
        raw = base64.b64decode(manifest["rng_torch"])
        torch.set_rng_state(torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy()))
