"""Toy end-to-end tracking transformer with a motion-aware track-query update.

Dense attention everywhere, with a Gaussian spatial prior that centres each
query's cross-attention on its anchor box; the backbone is three strided convolutions
(total stride 8). Queries carry an anchor box that doubles as their
positional encoding and is refined in logit space by every decoder layer.
"""

from __future__ import annotations

import hashlib
import io
import zipfile
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .geometry import ConfigError, box_embedding, inverse_sigmoid, refine_boxes

CHECKPOINT_VERSION = "matr-toy/1"
DETECT, TRACK = "detect", "track"


@dataclass
class ModelConfig:
    dim: int = 64
    num_queries: int = 20
    enc_layers: int = 2
    dec_layers: int = 3
    mat_layers: int = 1
    heads: int = 4
    num_classes: int = 1
    ffn_dim: int = 128
    image_height: int = 64
    image_width: int = 64
    backbone_channels: tuple[int, int] = (16, 32)
    seed: int = 0

    def validate(self):
        if self.dim % 8 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} must be divisible by 8 and by heads={self.heads}")
        for name in ("num_queries", "enc_layers", "dec_layers", "mat_layers", "heads",
                     "num_classes", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.image_height % 8 or self.image_width % 8:
            raise ConfigError("image size must be a multiple of the backbone stride (8)")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // 8, self.image_width // 8

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in types:
                continue
            if key == "backbone_channels":
                kwargs[key] = tuple(int(v) for v in value.split(","))
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


@dataclass
class QuerySet:
    features: torch.Tensor  # [N, D]
    anchors: torch.Tensor  # [N, 4]
    identities: list[Optional[int]]
    kinds: list[str]

    def __post_init__(self):
        n = len(self.kinds)
        if not (len(self.features) == len(self.anchors) == len(self.identities) == n):
            raise ValueError("QuerySet fields must have equal length")
        for ident, kind in zip(self.identities, self.kinds):
            if (ident is not None) != (kind == TRACK):
                raise ValueError("identities must be present exactly for track queries")

    def __len__(self) -> int:
        return len(self.kinds)

    def track_mask(self) -> list[bool]:
        return [k == TRACK for k in self.kinds]

    @property
    def num_tracks(self) -> int:
        return sum(self.track_mask())

    def select(self, indices) -> "QuerySet":
        idx = [int(i) for i in indices]
        index = torch.as_tensor(idx, dtype=torch.long)
        return QuerySet(self.features[index], self.anchors[index],
                        [self.identities[i] for i in idx], [self.kinds[i] for i in idx])

    def tracks(self) -> "QuerySet":
        return self.select([i for i, t in enumerate(self.track_mask()) if t])

    @staticmethod
    def concat(*sets: "QuerySet") -> "QuerySet":
        sets = [s for s in sets if s is not None]
        return QuerySet(torch.cat([s.features for s in sets]), torch.cat([s.anchors for s in sets]),
                        sum((s.identities for s in sets), []), sum((s.kinds for s in sets), []))

    @staticmethod
    def empty(dim: int, dtype=torch.float32) -> "QuerySet":
        return QuerySet(torch.zeros(0, dim, dtype=dtype), torch.zeros(0, 4, dtype=dtype), [], [])

    @staticmethod
    def from_tracks(features, anchors, identities: Sequence[int]) -> "QuerySet":
        return QuerySet(features, anchors, [int(i) for i in identities], [TRACK] * len(identities))


@dataclass
class EncoderMemory:
    tokens: torch.Tensor  # [L, D]
    positions: torch.Tensor  # [L, D]
    cells: Optional[torch.Tensor] = None  # [L, 2] token centers, enables the spatial prior

    def prior(self, anchors: torch.Tensor, heads: int):
        if self.cells is None:
            return None
        return spatial_prior(anchors, self.cells.to(anchors.dtype), heads).to(self.tokens.dtype)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class FrameOutput:
    logits: torch.Tensor  # [N, C+1], last column is no-object
    boxes: torch.Tensor  # [N, 4]
    embeddings: torch.Tensor  # [N, D]
    layer_logits: list[torch.Tensor] = field(default_factory=list)
    layer_boxes: list[torch.Tensor] = field(default_factory=list)
    mat_boxes: Optional[torch.Tensor] = None

    @property
    def probs(self) -> torch.Tensor:
        return self.logits.softmax(-1)

    def confidence(self) -> torch.Tensor:
        """Probability that a query holds some object (1 - p(no-object))."""
        return 1.0 - self.probs[:, -1]


def _mlp(dim: int, hidden: int, out: int, zero_last: bool = False) -> nn.Sequential:
    net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(),
                        nn.Linear(hidden, out))
    if zero_last:
        nn.init.zeros_(net[-1].weight)
        nn.init.zeros_(net[-1].bias)
    return net


def _attend(attn: nn.MultiheadAttention, query, key, value, bias=None) -> torch.Tensor:
    out, _ = attn(query[None], key[None], value[None], attn_mask=bias, need_weights=False)
    return out[0]


# Per-head sharpness of the spatial prior, in units of the anchor's own size.
PRIOR_SHARPNESS = (0.5, 2.0, 8.0, 32.0)


def spatial_prior(anchors: torch.Tensor, cells: torch.Tensor, heads: int) -> torch.Tensor:
    """Additive attention bias [heads, N, L] that favours tokens near each anchor.

    Distances are measured in anchor widths and heights, so a small box looks
    locally and a large one looks broadly. Heads cycle through
    ``PRIOR_SHARPNESS`` from broad to sharp.
    """
    dx = (cells[None, :, 0] - anchors[:, None, 0]) / anchors[:, None, 2]
    dy = (cells[None, :, 1] - anchors[:, None, 1]) / anchors[:, None, 3]
    dist2 = dx ** 2 + dy ** 2
    beta = torch.tensor([PRIOR_SHARPNESS[h % len(PRIOR_SHARPNESS)] for h in range(heads)],
                        dtype=dist2.dtype)
    return -beta[:, None, None] * dist2[None]


class Backbone(nn.Module):
    def __init__(self, channels: tuple[int, int], dim: int):
        super().__init__()
        c1, c2 = channels
        self.convs = nn.ModuleList([
            nn.Conv2d(3, c1, 3, stride=2, padding=1),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            nn.Conv2d(c2, dim, 3, stride=2, padding=1),
        ])

    def forward(self, x):
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.relu(x)
        return x


class EncoderLayer(nn.Module):
    def __init__(self, dim, heads, ffn_dim):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, dim))
        self.norm1, self.norm2 = nn.LayerNorm(dim), nn.LayerNorm(dim)

    def forward(self, x, pos):
        q = x + pos
        x = self.norm1(x + _attend(self.attn, q, q, x))
        return self.norm2(x + self.ffn(x))


class DecoderLayer(nn.Module):
    def __init__(self, dim, heads, ffn_dim):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, dim))
        self.norm1, self.norm2, self.norm3 = nn.LayerNorm(dim), nn.LayerNorm(dim), nn.LayerNorm(dim)

    def forward(self, x, pos, memory: EncoderMemory, anchors=None):
        q = x + pos
        x = self.norm1(x + _attend(self.self_attn, q, q, x))
        keys = memory.tokens + memory.positions
        bias = memory.prior(anchors, self.cross_attn.num_heads) if anchors is not None else None
        x = self.norm2(x + _attend(self.cross_attn, x + pos, keys, keys, bias))
        return self.norm3(x + self.ffn(x))


class MATLayer(nn.Module):
    """features' = features + CrossAtt(SelfAtt(features), memory).

    The cross-attention branch ends in ``out_proj``, zero-initialized so the
    layer starts as the identity on features.
    """

    def __init__(self, dim, heads, ffn_dim):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.self_norm = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.hidden = nn.Linear(dim, ffn_dim)
        self.out_proj = nn.Linear(ffn_dim, dim)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def self_att(self, x, pos):
        q = x + pos
        return self.self_norm(x + _attend(self.self_attn, q, q, x))

    def cross_att(self, x, pos, memory: EncoderMemory, anchors=None):
        keys = memory.tokens + memory.positions
        bias = memory.prior(anchors, self.cross_attn.num_heads) if anchors is not None else None
        h = x + _attend(self.cross_attn, x + pos, keys, keys, bias)
        return self.out_proj(F.relu(self.hidden(h)))

    def forward(self, x, pos, memory, anchors=None):
        return x + self.cross_att(self.self_att(x, pos), pos, memory, anchors)


class QIMLikeUpdate(nn.Module):
    """Self-attention-only track update: features' = features + SelfAtt(features)."""

    def __init__(self, dim, heads, ffn_dim):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.hidden = nn.Linear(dim, ffn_dim)
        self.out_proj = nn.Linear(ffn_dim, dim)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, x, pos):
        q = x + pos
        h = x + _attend(self.self_attn, q, q, x)
        return x + self.out_proj(F.relu(self.hidden(h)))


class MATRModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None, dtype=torch.float32):
        super().__init__()
        config = config or ModelConfig()
        config.validate()
        self.config = config
        d = config.dim
        gen = torch.Generator().manual_seed(config.seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.backbone = Backbone(config.backbone_channels, d)
            self.input_proj = nn.Linear(d, d)
            self.encoder = nn.ModuleList(
                [EncoderLayer(d, config.heads, config.ffn_dim) for _ in range(config.enc_layers)])
            self.decoder = nn.ModuleList(
                [DecoderLayer(d, config.heads, config.ffn_dim) for _ in range(config.dec_layers)])
            self.box_heads = nn.ModuleList(
                [_mlp(d, d, 4, zero_last=True) for _ in range(config.dec_layers)])
            self.class_head = nn.Linear(d, config.num_classes + 1)
            self.mat_layers = nn.ModuleList(
                [MATLayer(d, config.heads, config.ffn_dim) for _ in range(config.mat_layers)])
            self.mat_box_heads = nn.ModuleList(
                [_mlp(d, d, 4, zero_last=True) for _ in range(config.mat_layers)])
            self.qim = QIMLikeUpdate(d, config.heads, config.ffn_dim)
        self.query_features = nn.Parameter(torch.randn(config.num_queries, d, generator=gen))
        centers = torch.rand(config.num_queries, 2, generator=gen) * 0.8 + 0.1
        sizes = torch.rand(config.num_queries, 2, generator=gen) * 0.1 + 0.1
        self.query_anchor_logits = nn.Parameter(inverse_sigmoid(torch.cat([centers, sizes], -1)))
        self.register_buffer("memory_positions", self._grid_positions(), persistent=False)
        self.register_buffer("memory_cells", self._grid_cells(), persistent=False)
        self.counters: Counter = Counter()
        self.to(dtype)

    @property
    def dtype(self):
        return self.query_features.dtype

    def _grid_cells(self) -> torch.Tensor:
        gh, gw = self.config.grid
        ys = (torch.arange(gh, dtype=torch.float64) + 0.5) / gh
        xs = (torch.arange(gw, dtype=torch.float64) + 0.5) / gw
        cy, cx = torch.meshgrid(ys, xs, indexing="ij")
        return torch.stack([cx.flatten(), cy.flatten()], -1)

    def _grid_positions(self) -> torch.Tensor:
        gh, gw = self.config.grid
        ys = (torch.arange(gh, dtype=torch.float64) + 0.5) / gh
        xs = (torch.arange(gw, dtype=torch.float64) + 0.5) / gw
        cy, cx = torch.meshgrid(ys, xs, indexing="ij")
        cells = torch.stack([cx, cy, torch.full_like(cx, 1 / gw), torch.full_like(cx, 1 / gh)], -1)
        return box_embedding(cells.reshape(-1, 4), self.config.dim).to(torch.float32)

    def query_pos(self, anchors: torch.Tensor) -> torch.Tensor:
        return box_embedding(anchors, self.config.dim)

    # -- operations -----------------------------------------------------------

    def encode(self, image) -> EncoderMemory:
        img = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
        if img.shape != (self.config.image_height, self.config.image_width, 3):
            raise ConfigError(f"image shape {tuple(img.shape)} does not match model config "
                              f"({self.config.image_height}, {self.config.image_width}, 3)")
        x = img.to(self.dtype).permute(2, 0, 1)[None]
        feat = self.backbone(x)[0]  # [D, H', W']
        tokens = self.input_proj(feat.flatten(1).T)
        pos = self.memory_positions
        for layer in self.encoder:
            tokens = layer(tokens, pos)
        return EncoderMemory(tokens, pos, self.memory_cells)

    def init_queries(self) -> QuerySet:
        n = self.config.num_queries
        return QuerySet(self.query_features, torch.sigmoid(self.query_anchor_logits),
                        [None] * n, [DETECT] * n)

    def mat_update(self, tracks: QuerySet, memory: EncoderMemory):
        """Pre-move track queries into the current frame; returns (updated, boxes)."""
        self.counters["mat_update"] += 1
        if len(tracks) == 0:
            return tracks, tracks.anchors
        x, anchors = tracks.features, tracks.anchors
        for layer, head in zip(self.mat_layers, self.mat_box_heads):
            x = layer(x, self.query_pos(anchors), memory, anchors)
            anchors = refine_boxes(anchors, head(x))
        return QuerySet(x, anchors, list(tracks.identities), list(tracks.kinds)), anchors

    def qim_update(self, tracks: QuerySet) -> QuerySet:
        self.counters["qim_update"] += 1
        if len(tracks) == 0:
            return tracks
        x = self.qim(tracks.features, self.query_pos(tracks.anchors))
        return QuerySet(x, tracks.anchors, list(tracks.identities), list(tracks.kinds))

    def decode(self, queries: QuerySet, memory: EncoderMemory) -> FrameOutput:
        if len(queries) == 0:
            raise ValueError("decode needs at least one query")
        x, anchors = queries.features, queries.anchors
        layer_logits, layer_boxes = [], []
        for layer, head in zip(self.decoder, self.box_heads):
            x = layer(x, self.query_pos(anchors), memory, anchors)
            anchors = refine_boxes(anchors, head(x))
            layer_boxes.append(anchors)
            layer_logits.append(self.class_head(x))
        return FrameOutput(layer_logits[-1], anchors, x, layer_logits, layer_boxes)

    # -- checkpoints ----------------------------------------------------------

    def parameter_checksum(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


def save_checkpoint(model: MATRModel, path, extra: dict | None = None) -> Path:
    """Zip archive of ``name.npy`` arrays plus ``config.txt``; byte-stable for equal weights."""
    path = Path(path)
    entries = {"version.txt": (CHECKPOINT_VERSION + "\n").encode(),
               "config.txt": model.config.to_text().encode()}
    if extra:
        entries["meta.txt"] = "".join(f"{k}={v}\n" for k, v in sorted(extra.items())).encode()
    for name, tensor in sorted(model.state_dict().items()):
        buf = io.BytesIO()
        np.save(buf, tensor.detach().cpu().numpy(), allow_pickle=False)
        entries[f"params/{name}.npy"] = buf.getvalue()
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, data in entries.items():
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)
    return path


def load_checkpoint(path) -> MATRModel:
    with zipfile.ZipFile(path) as zf:
        version = zf.read("version.txt").decode().strip()
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version!r}")
        config = ModelConfig.from_text(zf.read("config.txt").decode())
        state = {}
        for name in zf.namelist():
            if name.startswith("params/"):
                arr = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
                state[name[len("params/"):-len(".npy")]] = torch.from_numpy(arr)
    dtype = state["query_features"].dtype
    model = MATRModel(config, dtype=dtype)
    model.load_state_dict(state)
    return model


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
