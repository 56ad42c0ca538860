"""
GRU encoder-decoder with country embeddings and a multi-quantile head.

Shapes follow a row-per-window convention: inputs are (batch, features),
weights map ``x @ W``. Gate equations, for each layer:

    u = sigmoid(x W_xu + h W_hu + b_u)
    r = sigmoid(x W_xr + h W_hr + b_r)
    c = tanh(x W_xh + (r * h) W_hh + b_h)
    h' = u * h + (1 - u) * c

so the update gate multiplies the previous state.
"""

import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.rng import RngStream
from .transform import N_FEATURES, TAIL_LENGTH, GlobalScaler, decoder_tail

logger = logging.getLogger(__name__)

QUANTILES = (0.05, 0.10, 0.50, 0.90, 0.95)
MEDIAN_INDEX = QUANTILES.index(0.50)

GATE_WEIGHTS = ("W_xu", "W_hu", "b_u", "W_xr", "W_hr", "b_r", "W_xh", "W_hh", "b_h")

CHECKPOINT_MAGIC = b"TFRCKPT\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable or incompatible checkpoint files."""


@dataclass(frozen=True)
class ModelConfig:
    n_countries: int
    d_emb: int = 8
    hidden_dim: int = 64
    n_layers: int = 2
    l_enc: int = 24
    l_pred: int = 15
    quantiles: Tuple[float, ...] = QUANTILES
    n_features: int = N_FEATURES

    @property
    def input_dim(self) -> int:
        return self.n_features + self.d_emb

    @property
    def median_index(self) -> int:
        return self.quantiles.index(0.50)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["quantiles"] = list(self.quantiles)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["quantiles"] = tuple(data.get("quantiles", QUANTILES))
        return cls(**data)


@dataclass
class GruLayerParams:
    W_xu: np.ndarray
    W_hu: np.ndarray
    b_u: np.ndarray
    W_xr: np.ndarray
    W_hr: np.ndarray
    b_r: np.ndarray
    W_xh: np.ndarray
    W_hh: np.ndarray
    b_h: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.W_xu.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W_hu.shape[0]

    @classmethod
    def initialize(cls, input_dim: int, hidden_dim: int, rng: RngStream) -> "GruLayerParams":
        """Uniform(-k, k) weights with k = 1/sqrt(fan_in); zero biases."""
        kx = 1.0 / np.sqrt(input_dim)
        kh = 1.0 / np.sqrt(hidden_dim)
        arrays = {}
        for name in GATE_WEIGHTS:
            if name.startswith("b_"):
                arrays[name] = np.zeros(hidden_dim)
            elif name.startswith("W_x"):
                arrays[name] = rng.uniform(-kx, kx, (input_dim, hidden_dim))
            else:
                arrays[name] = rng.uniform(-kh, kh, (hidden_dim, hidden_dim))
        return cls(**arrays)


@dataclass
class ModelParams:
    """All trainable arrays, exposed by name in a fixed declaration order."""

    encoder: List[GruLayerParams]
    decoder: List[GruLayerParams]
    embeddings: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    @classmethod
    def initialize(cls, config: ModelConfig, rng: RngStream) -> "ModelParams":
        def stack(label):
            layers = []
            for i in range(config.n_layers):
                in_dim = config.input_dim if i == 0 else config.hidden_dim
                layers.append(
                    GruLayerParams.initialize(in_dim, config.hidden_dim, rng.split(f"{label}.{i}"))
                )
            return layers

        emb_rng = rng.split("embeddings")
        head_rng = rng.split("head")
        ke = 1.0 / np.sqrt(config.d_emb)
        kh = 1.0 / np.sqrt(config.hidden_dim)
        return cls(
            encoder=stack("encoder"),
            decoder=stack("decoder"),
            embeddings=emb_rng.uniform(-ke, ke, (config.n_countries, config.d_emb)),
            head_w=head_rng.uniform(-kh, kh, (config.hidden_dim, len(config.quantiles))),
            head_b=np.zeros(len(config.quantiles)),
        )

    def named_arrays(self) -> Dict[str, np.ndarray]:
        named = {}
        for label, layers in (("encoder", self.encoder), ("decoder", self.decoder)):
            for i, layer in enumerate(layers):
                for name in GATE_WEIGHTS:
                    named[f"{label}.{i}.{name}"] = getattr(layer, name)
        named["embeddings"] = self.embeddings
        named["head.W"] = self.head_w
        named["head.b"] = self.head_b
        return named

    @classmethod
    def from_named(cls, named: Mapping[str, np.ndarray]) -> "ModelParams":
        def layers(label):
            out, i = [], 0
            while f"{label}.{i}.W_xu" in named:
                out.append(
                    GruLayerParams(
                        **{name: np.asarray(named[f"{label}.{i}.{name}"]) for name in GATE_WEIGHTS}
                    )
                )
                i += 1
            return out

        return cls(
            encoder=layers("encoder"),
            decoder=layers("decoder"),
            embeddings=np.asarray(named["embeddings"]),
            head_w=np.asarray(named["head.W"]),
            head_b=np.asarray(named["head.b"]),
        )

    def copy(self) -> "ModelParams":
        return ModelParams.from_named({k: v.copy() for k, v in self.named_arrays().items()})


def as_tensors(named: Mapping[str, np.ndarray], requires_grad: bool = False) -> Dict[str, Tensor]:
    wrap = ag.parameter if requires_grad else ag.constant
    return {name: wrap(value) for name, value in named.items()}


def _layer(tensors: Mapping[str, Tensor], label: str, i: int) -> Dict[str, Tensor]:
    return {name: tensors[f"{label}.{i}.{name}"] for name in GATE_WEIGHTS}


def gru_cell(x: Tensor, h_prev: Tensor, layer: Mapping[str, Tensor]) -> Tensor:
    """One GRU step for a batch of rows."""
    u = ag.sigmoid(
        ag.add(ag.add(ag.matmul(x, layer["W_xu"]), ag.matmul(h_prev, layer["W_hu"])), layer["b_u"])
    )
    r = ag.sigmoid(
        ag.add(ag.add(ag.matmul(x, layer["W_xr"]), ag.matmul(h_prev, layer["W_hr"])), layer["b_r"])
    )
    candidate = ag.tanh(
        ag.add(
            ag.add(ag.matmul(x, layer["W_xh"]), ag.matmul(ag.hadamard(r, h_prev), layer["W_hh"])),
            layer["b_h"],
        )
    )
    return ag.add(ag.hadamard(u, h_prev), ag.hadamard(ag.one_minus(u), candidate))


def _n_layers(tensors: Mapping[str, Tensor], label: str) -> int:
    n = 0
    while f"{label}.{n}.W_xu" in tensors:
        n += 1
    return n


def encode(
    encoder_input: np.ndarray,
    embedded: Tensor,
    tensors: Mapping[str, Tensor],
) -> List[Tensor]:
    """
    Run the encoder stack over (batch, l_enc, features) inputs.

    Every step feeds the lag features concatenated with the country embedding.

    Returns:
        Final hidden state of each layer.
    """
    batch, l_enc, _ = encoder_input.shape
    n_layers = _n_layers(tensors, "encoder")
    hidden_dim = tensors["encoder.0.W_hu"].shape[0]
    states = [ag.constant(np.zeros((batch, hidden_dim))) for _ in range(n_layers)]
    for step in range(l_enc):
        x = ag.concat([ag.constant(encoder_input[:, step, :]), embedded])
        for i in range(n_layers):
            states[i] = gru_cell(x, states[i], _layer(tensors, "encoder", i))
            x = states[i]
    return states


def decode(
    h_enc: Sequence[Tensor],
    tail: np.ndarray,
    embedded: Tensor,
    tensors: Mapping[str, Tensor],
    l_pred: int,
    targets: Optional[np.ndarray] = None,
    tf_prob: float = 0.0,
    rng: Optional[RngStream] = None,
    median_index: int = MEDIAN_INDEX,
) -> List[Tensor]:
    """
    Autoregressive decoder.

    Step 1 feeds the last observed value z_t. Later steps feed either the true
    previous target (teacher forcing, one Bernoulli(tf_prob) draw per step) or
    the model's own median output from the previous step. Lag features come
    from a rolling buffer of observed values followed by predicted medians.

    Args:
        h_enc: Encoder final states, one per layer; the decoder starts from them.
        tail: Observed z[t-6] .. z[t] per row, shape (batch, 7).
        embedded: Country embeddings for the batch.
        tensors: Parameter tensors by name.
        l_pred: Number of steps to decode.
        targets: True z[t+1] .. z[t+l_pred], required when tf_prob > 0.
        tf_prob: Teacher-forcing probability.
        rng: Stream for the Bernoulli draws (required when 0 < tf_prob < 1).

    Returns:
        One (batch, Q) tensor of quantile outputs per step.
    """
    if not 0.0 <= tf_prob <= 1.0:
        raise ValueError("tf_prob must be in [0, 1]")
    if tf_prob > 0 and targets is None:
        raise ValueError("Teacher targets are required when tf_prob > 0")
    if tail.shape[1] != TAIL_LENGTH:
        raise ValueError(f"Decoder tail must hold {TAIL_LENGTH} values per row")

    n_layers = _n_layers(tensors, "decoder")
    states = list(h_enc)
    buffer = [ag.constant(tail[:, j : j + 1]) for j in range(TAIL_LENGTH)]
    feedback = buffer[-1]
    outputs = []
    for k in range(l_pred):
        x = ag.concat([feedback, buffer[-3], buffer[-5], buffer[-7], embedded])
        for i in range(n_layers):
            states[i] = gru_cell(x, states[i], _layer(tensors, "decoder", i))
            x = states[i]
        out = ag.add(ag.matmul(states[-1], tensors["head.W"]), tensors["head.b"])
        outputs.append(out)

        median = ag.column(out, median_index)
        buffer.append(median)
        if k + 1 < l_pred:
            forced = tf_prob >= 1.0 or (tf_prob > 0.0 and rng.random() < tf_prob)
            feedback = ag.constant(targets[:, k : k + 1]) if forced else median
    return outputs


def forward(
    tensors: Mapping[str, Tensor],
    encoder_input: np.ndarray,
    country_ids: np.ndarray,
    l_pred: int,
    targets: Optional[np.ndarray] = None,
    tf_prob: float = 0.0,
    rng: Optional[RngStream] = None,
) -> List[Tensor]:
    """Encode then decode a batch; returns per-step (batch, Q) outputs."""
    embedded = ag.gather_rows(tensors["embeddings"], country_ids)
    h_enc = encode(encoder_input, embedded, tensors)
    tail = decoder_tail(encoder_input)
    return decode(h_enc, tail, embedded, tensors, l_pred, targets, tf_prob, rng)


def predict(
    params: ModelParams,
    encoder_input: np.ndarray,
    country_ids: np.ndarray,
    l_pred: int,
    chunk_size: int = 4096,
) -> np.ndarray:
    """
    Inference-mode forecast grid (batch, l_pred, Q) in standardized units,
    before quantile rearrangement.
    """
    if len(country_ids) == 0:
        return np.zeros((0, l_pred, params.head_b.shape[0]))
    tensors = as_tensors(params.named_arrays())
    grids = []
    for start in range(0, len(country_ids), chunk_size):
        stop = start + chunk_size
        outputs = forward(tensors, encoder_input[start:stop], country_ids[start:stop], l_pred)
        grids.append(np.stack([o.value for o in outputs], axis=1))
    return np.concatenate(grids, axis=0)


def rearrange_quantiles(grid: np.ndarray) -> np.ndarray:
    """Sort each step's quantile values ascending so levels never cross."""
    return np.sort(np.asarray(grid, dtype=np.float64), axis=-1)


def median_trajectory(grid: np.ndarray, median_index: int = MEDIAN_INDEX) -> np.ndarray:
    return rearrange_quantiles(grid)[..., median_index]


@dataclass
class Checkpoint:
    params: ModelParams
    config: ModelConfig
    scaler: GlobalScaler
    country_codes: List[str]
    extra: dict = field(default_factory=dict)

    @property
    def country_index(self) -> Dict[str, int]:
        return {code: i for i, code in enumerate(self.country_codes)}


def save_checkpoint(path: str, checkpoint: Checkpoint):
    """
    Write a checkpoint: magic, little-endian uint32 header length, a JSON
    header (config, scaler, country table, parameter manifest, extras) and
    every parameter in declaration order as little-endian float64.
    """
    named = checkpoint.params.named_arrays()
    header = {
        "version": CHECKPOINT_VERSION,
        "config": checkpoint.config.to_dict(),
        "scaler": checkpoint.scaler.to_dict(),
        "countries": list(checkpoint.country_codes),
        "params": [[name, list(value.shape)] for name, value in named.items()],
        "extra": checkpoint.extra,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for value in named.values():
            f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)
    if len(data) < offset + 4:
        raise CheckpointError(f"{path}: truncated before header length")
    (header_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if offset + header_len > len(data):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {header.get('version')} is not supported"
        )
    offset += header_len

    named = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated at parameter {name}")
        named[name] = np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")

    return Checkpoint(
        params=ModelParams.from_named(named),
        config=ModelConfig.from_dict(header["config"]),
        scaler=GlobalScaler.from_dict(header["scaler"]),
        country_codes=list(header["countries"]),
        extra=header.get("extra", {}),
    )
