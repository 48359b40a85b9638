"""Model assembly: coarse-to-fine flow inference with optional road prior,
attention stage and external-factor conditioning.

Four nested variants are supported (CLI names in parentheses):

* ``short``           -- upsampled coarse map through the residual trunk only.
* ``short-road``      -- adds the road feature branch fused mid-trunk.
* ``short-long-road`` -- adds the attention stage with a road-feature query.
* ``full``            -- adds the external-factor channel.

Absent stages are replaced by zero channels of matching arity, so the trunk
sees the same input layout in every variant and parameter counts strictly
increase along the list above. All forward entry points take a leading batch
axis.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, RunConfig
from .layers import Conv2D, Dense, ResidualBlock2D, bilinear_resize, maxpool2d
from .road import RoadBranch
from .tensor import Tensor

_INIT_STREAM = 1
_GATE_INIT = 1.0

# External factor vector layout: columns of every (batch, 5) input.
EXT_WEATHER, EXT_TEMPERATURE, EXT_WINDSPEED, EXT_DAY_OF_WEEK, EXT_TIME_OF_DAY = range(5)
WEATHER_CODES = 14


def encode_external(ext: np.ndarray, intervals_per_day: int) -> np.ndarray:
    """Validate ranges and scale the ordinal columns onto [0, 1]."""
    ext = np.asarray(ext, dtype=np.float64)
    if ext.ndim != 2 or ext.shape[1] != 5:
        raise ValueError(f"external factors must be (batch, 5), got {ext.shape}")
    weather = ext[:, EXT_WEATHER]
    dow = ext[:, EXT_DAY_OF_WEEK]
    tod = ext[:, EXT_TIME_OF_DAY]
    if ((weather < 0) | (weather > WEATHER_CODES - 1)).any():
        raise ValueError("weather code outside [0, 13]")
    if ((ext[:, EXT_TEMPERATURE] < 0) | (ext[:, EXT_TEMPERATURE] > 1)).any():
        raise ValueError("temperature outside [0, 1]")
    if ((ext[:, EXT_WINDSPEED] < 0) | (ext[:, EXT_WINDSPEED] > 1)).any():
        raise ValueError("windspeed outside [0, 1]")
    if ((dow < 0) | (dow > 6)).any():
        raise ValueError("day of week outside [0, 6]")
    if ((tod < 0) | (tod > intervals_per_day - 1)).any():
        raise ValueError(f"time of day outside [0, {intervals_per_day - 1}]")
    scaled = ext.copy()
    scaled[:, EXT_WEATHER] = weather / (WEATHER_CODES - 1)
    scaled[:, EXT_DAY_OF_WEEK] = dow / 6.0
    scaled[:, EXT_TIME_OF_DAY] = tod / max(intervals_per_day - 1, 1)
    return scaled


class ExternalMLP:
    """Two ReLU dense layers squeezing the factor vector to one nonnegative
    scalar per sample, tiled over the fine grid as an extra channel."""

    def __init__(self, rng: np.random.Generator, hidden: int = 128):
        self.dense1 = Dense(5, hidden, rng)
        self.dense2 = Dense(hidden, 1, rng)

    def __call__(self, ext_scaled: np.ndarray, i_f: int, j_f: int) -> Tensor:
        h = T.relu(self.dense1(Tensor(ext_scaled)))
        y = T.relu(self.dense2(h))
        y = T.reshape(y, (y.shape[0], 1, 1, 1))
        return T.tile(y, (1, i_f, j_f, 1))

    def param_items(self, prefix: str = ""):
        return (self.dense1.param_items(prefix + "dense1.")
                + self.dense2.param_items(prefix + "dense2."))

    def batchnorms(self, prefix: str = ""):
        return []


class ShortRangeNet:
    """Residual trunk: fuse (upsampled coarse, external channel), then the
    road features, then produce a C-channel fine feature map."""

    N_PRE_BLOCKS = 5
    N_POST_BLOCKS = 11

    def __init__(self, channels: int, rng: np.random.Generator):
        c = channels
        self.entry = Conv2D(9, 3, c, rng)
        self.blocks_pre = [ResidualBlock2D(c, rng) for _ in range(self.N_PRE_BLOCKS)]
        self.road_fuse = Conv2D(3, 2 * c, c, rng)
        self.blocks_post = [ResidualBlock2D(c, rng) for _ in range(self.N_POST_BLOCKS)]
        self.out1 = Conv2D(3, c, c, rng)
        self.out2 = Conv2D(3, c, c, rng)

    def __call__(self, up: Tensor, f_ext: Tensor, f_road: Tensor,
                 train: bool) -> Tensor:
        h = self.entry(T.concat([up, f_ext], axis=3))
        for block in self.blocks_pre:
            h = block(h, train)
        h = self.road_fuse(T.concat([h, f_road], axis=3))
        for block in self.blocks_post:
            h = block(h, train)
        return self.out2(self.out1(h))

    def param_items(self, prefix: str = ""):
        items = self.entry.param_items(prefix + "entry.")
        for i, block in enumerate(self.blocks_pre):
            items.extend(block.param_items(prefix + f"pre{i}."))
        items.extend(self.road_fuse.param_items(prefix + "road_fuse."))
        for i, block in enumerate(self.blocks_post):
            items.extend(block.param_items(prefix + f"post{i}."))
        items.extend(self.out1.param_items(prefix + "out1."))
        items.extend(self.out2.param_items(prefix + "out2."))
        return items

    def batchnorms(self, prefix: str = ""):
        found = []
        for i, block in enumerate(self.blocks_pre):
            found.extend(block.batchnorms(prefix + f"pre{i}."))
        for i, block in enumerate(self.blocks_post):
            found.extend(block.batchnorms(prefix + f"post{i}."))
        return found


class AttentionStage:
    """Single-head encoder over pooled trunk features and a decoder driven by
    a road-feature (or learned positional) query. No layer norm, no dropout."""

    def __init__(self, channels: int, tokens: int, query_mode: str,
                 rng: np.random.Generator):
        c = channels
        self.channels = c
        self.enc_wq = T.xavier_init((c, c), c, c, rng)
        self.enc_wk = T.xavier_init((c, c), c, c, rng)
        self.enc_wv = T.xavier_init((c, c), c, c, rng)
        self.enc_ffn1 = Dense(c, 2 * c, rng)
        self.enc_ffn2 = Dense(2 * c, c, rng)
        self.self_wq = T.xavier_init((c, c), c, c, rng)
        self.self_wk = T.xavier_init((c, c), c, c, rng)
        self.self_wv = T.xavier_init((c, c), c, c, rng)
        self.cross_wq = T.xavier_init((c, c), c, c, rng)
        self.cross_wk = T.xavier_init((c, c), c, c, rng)
        self.cross_wv = T.xavier_init((c, c), c, c, rng)
        self.dec_ffn1 = Dense(c, 2 * c, rng)
        self.dec_ffn2 = Dense(2 * c, c, rng)
        self.query_embed = None
        if query_mode == "positional":
            self.query_embed = T.xavier_init((tokens, c), tokens, c, rng)
        # Zero the two sample-dependent output paths (cross values, decoder
        # FFN output). The decoder then starts as a fixed transform of its
        # static query and grows its data-dependent contribution from zero,
        # instead of injecting Xavier-scale noise into a trunk that is still
        # learning. Draws above stay in place so parameter shapes and the
        # rng stream are unchanged.
        self.cross_wv.data[:] = 0.0
        self.dec_ffn2.weight.data[:] = 0.0

    def _attend(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))),
                         1.0 / math.sqrt(self.channels))
        return T.matmul(T.softmax(scores), v)

    def encode(self, tokens: Tensor) -> Tensor:
        att = self._attend(T.matmul(tokens, self.enc_wq),
                           T.matmul(tokens, self.enc_wk),
                           T.matmul(tokens, self.enc_wv))
        a = T.add(tokens, att)
        h = self.enc_ffn2(T.relu(self.enc_ffn1(a)))
        return T.add(a, h)

    def decode(self, encoded: Tensor, query_tokens: Tensor) -> Tensor:
        att = self._attend(T.matmul(query_tokens, self.self_wq),
                           T.matmul(query_tokens, self.self_wk),
                           T.matmul(query_tokens, self.self_wv))
        rq = T.add(query_tokens, att)
        cross = self._attend(T.matmul(rq, self.cross_wq),
                             T.matmul(encoded, self.cross_wk),
                             T.matmul(encoded, self.cross_wv))
        a = T.add(rq, cross)
        h = self.dec_ffn2(T.relu(self.dec_ffn1(a)))
        return T.add(a, h)

    def param_items(self, prefix: str = ""):
        items = [
            (prefix + "enc_wq", self.enc_wq), (prefix + "enc_wk", self.enc_wk),
            (prefix + "enc_wv", self.enc_wv),
        ]
        items.extend(self.enc_ffn1.param_items(prefix + "enc_ffn1."))
        items.extend(self.enc_ffn2.param_items(prefix + "enc_ffn2."))
        items.extend([
            (prefix + "self_wq", self.self_wq), (prefix + "self_wk", self.self_wk),
            (prefix + "self_wv", self.self_wv),
            (prefix + "cross_wq", self.cross_wq), (prefix + "cross_wk", self.cross_wk),
            (prefix + "cross_wv", self.cross_wv),
        ])
        items.extend(self.dec_ffn1.param_items(prefix + "dec_ffn1."))
        items.extend(self.dec_ffn2.param_items(prefix + "dec_ffn2."))
        if self.query_embed is not None:
            items.append((prefix + "query_embed", self.query_embed))
        return items

    def batchnorms(self, prefix: str = ""):
        return []


class FlowModel:
    """Assembled network. ``forward`` maps a batch of normalized coarse maps
    (plus optional external factors and a road raster) to fine maps."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        cfg.validate()
        self.variant = cfg.variant
        self.i_c, self.j_c = cfg.i_c, cfg.j_c
        self.i_f, self.j_f = cfg.i_f, cfg.j_f
        self.channels = cfg.channels
        self.pool = cfg.pool
        self.query_mode = cfg.query_mode
        self.intervals_per_day = cfg.intervals_per_day
        self.token_grid = (self.i_f // cfg.pool, self.j_f // cfg.pool)

        has_external = cfg.variant == "full"
        has_road = cfg.variant in ("short-road", "short-long-road", "full")
        has_attention = cfg.variant in ("short-long-road", "full")

        self.external = ExternalMLP(rng) if has_external else None
        self.road = (RoadBranch(cfg.channels, cfg.radius, rng, cfg.road_conv)
                     if has_road else None)
        self.short = ShortRangeNet(cfg.channels, rng)
        tokens = self.token_grid[0] * self.token_grid[1]
        self.attention = (AttentionStage(cfg.channels, tokens, cfg.query_mode, rng)
                          if has_attention else None)
        # Learnable scale on the attention output. Starts neutral: the stage
        # itself begins as a pass-through of its static query (see
        # AttentionStage), so there is nothing to attenuate at first and the
        # optimizer keeps a single cheap knob to mute the stage later.
        self.long_gate = None
        if has_attention:
            self.long_gate = T.zeros((1,), requires_grad=True)
            self.long_gate.data[:] = _GATE_INIT
        self.head = Conv2D(1, cfg.channels, 2, rng)
        # Zero head: training starts from the all-zero predictor (loss 1.0)
        # instead of spending its budget shrinking Xavier-scale outputs down
        # to the normalized flow range.
        self.head.kernel.data[:] = 0.0

    def forward(self, coarse: np.ndarray, external: np.ndarray | None,
                road_input: np.ndarray | None, train: bool) -> Tensor:
        coarse = np.asarray(coarse, dtype=np.float64)
        if coarse.ndim != 4 or coarse.shape[1:] != (self.i_c, self.j_c, 2):
            raise ValueError(
                f"coarse batch must be (B, {self.i_c}, {self.j_c}, 2), got {coarse.shape}")
        batch = coarse.shape[0]
        up = bilinear_resize(Tensor(coarse), self.i_f, self.j_f)

        if self.external is not None:
            if external is None:
                raise ValueError("this variant needs external factors")
            scaled = encode_external(external, self.intervals_per_day)
            if scaled.shape[0] != batch:
                raise ValueError("external factor batch size mismatch")
            f_ext = self.external(scaled, self.i_f, self.j_f)
        else:
            f_ext = T.zeros((batch, self.i_f, self.j_f, 1))

        f_road_one = None
        if self.road is not None:
            if road_input is None:
                raise ValueError("this variant needs a road raster")
            road_t = Tensor(np.asarray(road_input, dtype=np.float64)[None])
            f_road_one = self.road(road_t, train)
            f_road = T.tile(f_road_one, (batch, 1, 1, 1))
        else:
            f_road = T.zeros((batch, self.i_f, self.j_f, self.channels))

        feat = self.short(up, f_ext, f_road, train)

        if self.attention is not None:
            t_h, t_w = self.token_grid
            tokens = T.reshape(maxpool2d(feat, self.pool),
                               (batch, t_h * t_w, self.channels))
            encoded = self.attention.encode(tokens)
            if self.query_mode == "positional":
                q = T.reshape(self.attention.query_embed,
                              (1, t_h * t_w, self.channels))
            else:
                q = T.reshape(maxpool2d(f_road_one, self.pool),
                              (1, t_h * t_w, self.channels))
            q = T.tile(q, (batch, 1, 1))
            decoded = self.attention.decode(encoded, q)
            long_map = T.reshape(decoded, (batch, t_h, t_w, self.channels))
            long_map = bilinear_resize(long_map, self.i_f, self.j_f)
            gate = T.tile(T.reshape(self.long_gate, (1, 1, 1, 1)), long_map.shape)
            feat = T.add(feat, T.mul(gate, long_map))

        return self.head(feat)

    def param_items(self):
        items = []
        if self.external is not None:
            items.extend(self.external.param_items("external."))
        if self.road is not None:
            items.extend(self.road.param_items("road."))
        items.extend(self.short.param_items("short."))
        if self.attention is not None:
            items.extend(self.attention.param_items("attn."))
            items.append(("attn.long_gate", self.long_gate))
        items.extend(self.head.param_items("head."))
        return items

    def parameters(self):
        return [t for _, t in self.param_items()]

    def batchnorms(self):
        found = []
        if self.road is not None:
            found.extend(self.road.batchnorms("road."))
        found.extend(self.short.batchnorms("short."))
        return found

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())


def build_variant(cfg: RunConfig, seed: int | None = None) -> FlowModel:
    """Construct a variant with Xavier-initialized weights, deterministically
    from the seed."""
    if seed is None:
        seed = cfg.seed
    rng = T.make_rng(seed, _INIT_STREAM)
    return FlowModel(cfg, rng)


def mape_loss(pred: Tensor, truth: np.ndarray, eps: float = 1e-5) -> Tensor:
    """Per-sample sum |pred - truth| / (sum |truth| + eps), averaged over the
    batch (axis 0). Scale-free up to eps; differentiable through ``pred``."""
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if pred.ndim < 2:
        raise ValueError("loss input needs a leading batch axis")
    per_axes = tuple(range(1, pred.ndim))
    batch = pred.shape[0]
    denom = np.abs(truth).sum(axis=per_axes) + eps
    err = T.reduce_sum(T.absolute(T.sub(pred, Tensor(truth))), axes=per_axes)
    weighted = T.mul(err, Tensor(1.0 / denom))
    return T.scale(T.reduce_sum(weighted), 1.0 / batch)


# --------------------------------------------------------------------------
# Checkpoints: a directory of RTFM tensors plus a key=value manifest.

_MANIFEST_NAME = "manifest.txt"
_ROAD_INPUT_NAME = "road_input.rtfm"


def save_checkpoint(path, model: FlowModel, manifest: dict,
                    road_input: np.ndarray | None) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={manifest[k]}" for k in sorted(manifest)]
    (out / _MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    for name, param in model.param_items():
        T.write_tensor(out / f"{name}.rtfm", param.data)
    for prefix, bn in model.batchnorms():
        T.write_tensor(out / f"{prefix}running_mean.rtfm", bn.running_mean)
        T.write_tensor(out / f"{prefix}running_var.rtfm", bn.running_var)
    if road_input is not None:
        T.write_tensor(out / _ROAD_INPUT_NAME, road_input)


def read_manifest(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"manifest not found: {p}")
    out = {}
    for line in p.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}: bad manifest line {line!r}")
        key, value = line.split("=", 1)
        out[key] = value
    return out


def load_checkpoint(path) -> tuple[FlowModel, dict, np.ndarray | None]:
    """Rebuild a model from a checkpoint directory.

    Returns (model, manifest, road_input). Parameters pass through the
    float32 container, so a save/load/save cycle is byte-stable.
    """
    src = Path(path)
    manifest = read_manifest(src / _MANIFEST_NAME)
    try:
        cfg = RunConfig(
            i_c=int(manifest["i_c"]), j_c=int(manifest["j_c"]),
            n=int(manifest["n"]), channels=int(manifest["channels"]),
            radius=int(manifest["radius"]), pool=int(manifest["pool"]),
            variant=manifest["variant"], road_conv=manifest["road_conv"],
            road_weighting=manifest["road_weighting"],
            query_mode=manifest["query_mode"],
            intervals_per_day=int(manifest["intervals_per_day"]),
            seed=int(manifest["seed"]),
        )
    except KeyError as exc:
        raise ConfigError(f"checkpoint manifest missing key {exc}") from None
    model = build_variant(cfg)
    for name, param in model.param_items():
        data = T.read_tensor(src / f"{name}.rtfm")
        if data.shape != param.shape:
            raise ConfigError(
                f"checkpoint tensor {name} has shape {data.shape}, "
                f"model expects {param.shape}")
        param.data = data
    for prefix, bn in model.batchnorms():
        bn.running_mean = T.read_tensor(src / f"{prefix}running_mean.rtfm")
        bn.running_var = T.read_tensor(src / f"{prefix}running_var.rtfm")
    road_input = None
    road_file = src / _ROAD_INPUT_NAME
    if road_file.exists():
        road_input = T.read_tensor(road_file)
    elif model.road is not None:
        raise ConfigError(f"checkpoint {src} is missing {_ROAD_INPUT_NAME}")
    return model, manifest, road_input
