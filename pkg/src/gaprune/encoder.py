"""Small MLP-block embedding encoder with a named parameter registry.

Architecture (pre-norm residual MLP blocks, no attention)::

    h0 = E[tokens]
    h_{l+1} = h_l + W_out_l gelu(W_in_l rmsnorm(h_l) * g_l + b_in_l) + b_out_l
    embedding = l2_normalize(mean_pool(h_L))

Only the MLP weight matrices are prunable.  Biases, norm gains and the
token table are carried along but never scored or masked.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from gaprune import numcore as nc
from gaprune.artifacts import canonical_json, fnv1a64, fnv1a64_hex, read_envelope, write_envelope
from gaprune.errors import ConfigError, DimensionError, InputError, IntegrityError

if TYPE_CHECKING:
    from gaprune.analysis import PruneMask

ROLES = ("embedding", "mlp_in", "mlp_out", "norm", "bias")
PRUNABLE_ROLES = frozenset({"mlp_in", "mlp_out"})
NORM_EPS = 1e-6
EMBED_EPS = 1e-12


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 2048
    embed_dim: int = 32
    num_layers: int = 3
    hidden_dim: int = 64
    max_tokens: int = 32
    seed: int = 0
    # MLP weights start at mlp_init_scale / sqrt(fan_in); small values keep the
    # blocks near identity so training shapes them rather than the embeddings
    mlp_init_scale: float = 0.1

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "num_layers", "hidden_dim", "max_tokens"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"encoder.{name} must be a positive int, got {v!r}")
        if self.num_layers < 2:
            raise ConfigError("encoder.num_layers must be >= 2")
        if self.hidden_dim < self.embed_dim:
            raise ConfigError("encoder.hidden_dim must be >= embed_dim")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("encoder.seed must be an unsigned int")
        if not (isinstance(self.mlp_init_scale, (int, float)) and self.mlp_init_scale > 0):
            raise ConfigError("encoder.mlp_init_scale must be > 0")


@dataclass
class ParamEntry:
    name: str
    layer_index: int
    role: str
    value: np.ndarray

    @property
    def prunable(self) -> bool:
        return self.role in PRUNABLE_ROLES


@dataclass
class ParamRegistry:
    config: EncoderConfig
    entries: list[ParamEntry] = field(default_factory=list)

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names in registry")
        for e in self.entries:
            if e.role not in ROLES:
                raise ConfigError(f"unknown role {e.role!r} for {e.name}")

    def __getitem__(self, name: str) -> ParamEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def prunable(self) -> list[ParamEntry]:
        return [e for e in self.entries if e.prunable]

    @property
    def d_prunable(self) -> int:
        return sum(e.value.size for e in self.prunable())

    def layout(self) -> list[list]:
        return [[e.name, list(e.value.shape), e.layer_index, e.role, e.prunable] for e in self.entries]

    def fingerprint(self) -> str:
        """Structural fingerprint: names, shapes, layers, roles, prunable flags."""
        return fnv1a64_hex(canonical_json(self.layout()))

    def values(self) -> dict[str, np.ndarray]:
        return {e.name: e.value for e in self.entries}

    def copy(self) -> "ParamRegistry":
        return self.with_values({e.name: e.value.copy() for e in self.entries})

    def with_values(self, values: dict[str, np.ndarray]) -> "ParamRegistry":
        entries = []
        for e in self.entries:
            v = np.array(values.get(e.name, e.value), dtype=np.float64, copy=True)
            if v.shape != e.value.shape:
                raise DimensionError(f"{e.name}: shape {v.shape} != {e.value.shape}")
            entries.append(dataclasses.replace(e, value=v))
        return ParamRegistry(self.config, entries)

    def flat_prunable(self) -> np.ndarray:
        return np.concatenate([e.value.reshape(-1) for e in self.prunable()])

    def save(self, path: Path | str) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path: Path | str) -> "ParamRegistry":
        return load_checkpoint(path)


@dataclass
class EncoderOutput:
    embedding: np.ndarray
    per_layer_hidden: Optional[list[np.ndarray]] = None


# --- construction ---------------------------------------------------------


def init_encoder(config: EncoderConfig) -> ParamRegistry:
    """Seeded initialization; the same config always yields the same values."""
    rng = np.random.default_rng(config.seed)
    d, h = config.embed_dim, config.hidden_dim
    c = float(config.mlp_init_scale)
    entries = [ParamEntry("tok_embed", -1, "embedding", rng.normal(0.0, 1.0, (config.vocab_size, d)))]
    for layer in range(config.num_layers):
        p = f"layers.{layer}"
        entries += [
            ParamEntry(f"{p}.norm.gain", layer, "norm", np.ones(d)),
            ParamEntry(f"{p}.mlp_in.weight", layer, "mlp_in", rng.normal(0.0, c / math.sqrt(d), (h, d))),
            ParamEntry(f"{p}.mlp_in.bias", layer, "bias", np.zeros(h)),
            ParamEntry(f"{p}.mlp_out.weight", layer, "mlp_out", rng.normal(0.0, c / math.sqrt(h), (d, h))),
            ParamEntry(f"{p}.mlp_out.bias", layer, "bias", np.zeros(d)),
        ]
    return ParamRegistry(config, entries)


# --- tokenization ---------------------------------------------------------


def token_id(token: str, vocab_size: int) -> int:
    return fnv1a64(token.encode("utf-8")) % vocab_size


def tokenize(text: str, config: EncoderConfig) -> list[int]:
    """Whitespace split, lowercase, hash to ids, truncate to max_tokens."""
    words = text.lower().split()
    if not words:
        raise InputError("cannot tokenize empty text")
    return [token_id(w, config.vocab_size) for w in words[: config.max_tokens]]


# --- forward pass ---------------------------------------------------------


def bind(registry: ParamRegistry, tape: nc.Tape) -> dict[str, nc.Var]:
    return {e.name: tape.variable(e.value) for e in registry.entries}


def _check_tokens(config: EncoderConfig, seq: Sequence[int]) -> None:
    if not 1 <= len(seq) <= config.max_tokens:
        raise InputError(f"token sequence length {len(seq)} outside [1, {config.max_tokens}]")
    for t in seq:
        if not 0 <= int(t) < config.vocab_size:
            raise InputError(f"token id {t} outside vocabulary of size {config.vocab_size}")


def _block(params: dict[str, nc.Var], layer: int, h: nc.Var, dim: int) -> nc.Var:
    p = f"layers.{layer}"
    u = nc.scale(nc.l2_normalize(h, NORM_EPS), math.sqrt(dim))
    u = nc.mul(u, params[f"{p}.norm.gain"])
    z = nc.add(nc.matmul(u, nc.transpose(params[f"{p}.mlp_in.weight"])), params[f"{p}.mlp_in.bias"])
    z = nc.gelu(z)
    z = nc.add(nc.matmul(z, nc.transpose(params[f"{p}.mlp_out.weight"])), params[f"{p}.mlp_out.bias"])
    return nc.add(h, z)


def forward(params: dict[str, nc.Var], config: EncoderConfig, seqs: Sequence[Sequence[int]],
            capture_layers: bool = False) -> tuple[nc.Var, list[nc.Var]]:
    """Embed a batch of token sequences on the params' tape.

    Returns the unit-norm embeddings (one row per sequence) and, when
    ``capture_layers`` is set, the pooled-and-normalized output of every block.
    """
    if not seqs:
        raise InputError("empty batch")
    for s in seqs:
        _check_tokens(config, s)
    ids = np.concatenate([np.asarray(s, dtype=np.intp) for s in seqs])
    lengths = [len(s) for s in seqs]
    h = nc.gather_rows(params["tok_embed"], ids)
    layers = []
    for layer in range(config.num_layers):
        h = _block(params, layer, h, config.embed_dim)
        if capture_layers and layer < config.num_layers - 1:
            layers.append(nc.l2_normalize(nc.segment_mean_pool(h, lengths), EMBED_EPS))
    emb = nc.l2_normalize(nc.segment_mean_pool(h, lengths), EMBED_EPS)
    if capture_layers:
        layers.append(emb)
    return emb, layers


def encode_batch(registry: ParamRegistry, seqs: Sequence[Sequence[int]], layer: Optional[int] = None) -> np.ndarray:
    """Embeddings as a plain array; ``layer`` selects an intermediate block."""
    cfg = registry.config
    if layer is not None and not 0 <= layer < cfg.num_layers:
        raise ValueError(f"layer {layer} outside [0, {cfg.num_layers})")
    tape = nc.Tape()
    params = bind(registry, tape)
    emb, layers = forward(params, cfg, seqs, capture_layers=layer is not None)
    out = emb if layer is None else layers[layer]
    return np.array(out.value)


def encode_texts(registry: ParamRegistry, texts: Sequence[str], layer: Optional[int] = None,
                 chunk: int = 256) -> np.ndarray:
    seqs = [tokenize(t, registry.config) for t in texts]
    parts = [encode_batch(registry, seqs[i:i + chunk], layer) for i in range(0, len(seqs), chunk)]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, registry.config.embed_dim))


def encode(registry: ParamRegistry, tokens: Sequence[int], capture_layers: bool = False) -> EncoderOutput:
    tape = nc.Tape()
    emb, layers = forward(bind(registry, tape), registry.config, [tokens], capture_layers)
    hidden = [np.array(v.value[0]) for v in layers] if capture_layers else None
    return EncoderOutput(np.array(emb.value[0]), hidden)


def encode_at_layer(registry: ParamRegistry, tokens: Sequence[int], layer: int) -> np.ndarray:
    return encode_batch(registry, [tokens], layer)[0]


# --- masking --------------------------------------------------------------


def apply_mask(registry: ParamRegistry, mask: "PruneMask") -> ParamRegistry:
    """Zero the dropped prunable elements; everything else is copied unchanged."""
    if mask.fingerprint != registry.fingerprint():
        raise IntegrityError("mask was built for a different registry layout")
    values = {}
    for e in registry.prunable():
        bits = mask.bits.get(e.name)
        if bits is None or bits.shape != e.value.shape:
            raise IntegrityError(f"mask does not cover {e.name}")
        values[e.name] = np.where(bits, e.value, 0.0)
    return registry.with_values(values)


def measure_sparsity(registry: ParamRegistry) -> float:
    flat = registry.flat_prunable()
    return float(np.count_nonzero(flat == 0.0)) / flat.size


# --- checkpoint I/O -------------------------------------------------------


def save_checkpoint(registry: ParamRegistry, path: Path | str) -> None:
    entries, chunks, offset = [], [], 0
    for e in registry.entries:
        raw = np.ascontiguousarray(e.value, dtype="<f8").tobytes()
        entries.append({"name": e.name, "shape": list(e.value.shape), "layer_index": e.layer_index,
                        "role": e.role, "prunable": e.prunable, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {"kind": "checkpoint", "config": dataclasses.asdict(registry.config),
              "fingerprint": registry.fingerprint(), "entries": entries}
    write_envelope(path, header, b"".join(chunks))


def load_checkpoint(path: Path | str) -> ParamRegistry:
    header, payload = read_envelope(path)
    if header.get("kind") != "checkpoint":
        raise IntegrityError(f"{path}: not a checkpoint")
    config = EncoderConfig(**header["config"])
    entries = []
    for spec in header["entries"]:
        n = int(np.prod(spec["shape"], dtype=np.int64))
        start = spec["offset"]
        if start + 8 * n > len(payload):
            raise IntegrityError(f"{path}: truncated payload at {spec['name']}")
        value = np.frombuffer(payload, dtype="<f8", count=n, offset=start).astype(np.float64).reshape(spec["shape"])
        entry = ParamEntry(spec["name"], spec["layer_index"], spec["role"], value)
        if entry.prunable != spec["prunable"]:
            raise IntegrityError(f"{path}: prunable flag inconsistent for {spec['name']}")
        entries.append(entry)
    registry = ParamRegistry(config, entries)
    if registry.fingerprint() != header["fingerprint"]:
        raise IntegrityError(f"{path}: layout fingerprint mismatch")
    return registry
