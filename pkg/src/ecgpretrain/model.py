"""Convolutional encoder, Gumbel product quantizer and transformer contextualizer.

Shapes follow the batch-first, channel-last convention: raw input is
(B, 12, L) in leads x samples, latents Z are (B, T, channels), contextual
features C are (B, T, d_model). Parameters live in a flat ``name -> Tensor``
dict so that checkpoints and optimizers can treat them uniformly.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from .errors import CheckpointError, ContractError
from .numerics import Rng, Tensor
from .numerics import ops
from .signal import N_LEADS


@dataclass
class ConvConfig:
    n_blocks: int = 4
    channels: int = 256
    kernel: int = 2
    stride: int = 2


@dataclass
class TransformerConfig:
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    d_ff: int = 256
    max_positions: int = 256


@dataclass
class QuantizerConfig:
    groups: int = 2
    codes_per_group: int = 16
    code_dim: int = 64
    contrastive_dim: int = 64
    tau_start: float = 2.0
    tau_floor: float = 0.5
    tau_decay: float = 0.995

    def temperature(self, step: int) -> float:
        return max(self.tau_floor, self.tau_start * self.tau_decay**step)


@dataclass
class MaskConfig:
    p_start: float = 0.065
    span: int = 10


@dataclass
class ModelConfig:
    preset: str = "toy"
    conv: ConvConfig = field(default_factory=ConvConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)

    def __post_init__(self):
        tf, q = self.transformer, self.quantizer
        if tf.d_model % tf.heads:
            raise ContractError("d_model must be divisible by the number of heads")
        if q.code_dim % q.groups:
            raise ContractError("code_dim must be divisible by the number of groups")

    @classmethod
    def from_preset(cls, name: str) -> "ModelConfig":
        if name == "toy":
            return cls()
        if name == "paper":
            return cls(
                preset="paper",
                transformer=TransformerConfig(layers=12, d_model=768, heads=12, d_ff=3072, max_positions=512),
                quantizer=QuantizerConfig(codes_per_group=320, code_dim=256, contrastive_dim=256, tau_decay=0.999995),
            )
        raise ContractError(f"unknown preset {name!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        base = cls.from_preset(d.get("preset", "toy"))
        parts = {
            "conv": ConvConfig,
            "transformer": TransformerConfig,
            "quantizer": QuantizerConfig,
            "mask": MaskConfig,
        }
        kwargs = {"preset": base.preset}
        for key, klass in parts.items():
            merged = {**asdict(getattr(base, key)), **d.get(key, {})}
            kwargs[key] = klass(**merged)
        return cls(**kwargs)


def encoded_length(n_samples: int, conv: ConvConfig | None = None) -> int:
    """Time steps after the conv stack: L' = floor((L - k) / s) + 1 per block."""
    conv = conv or ConvConfig()
    length = n_samples
    for _ in range(conv.n_blocks):
        length = (length - conv.kernel) // conv.stride + 1
        if length < 1:
            return 0
    return length


@dataclass
class QuantizerOutput:
    q: Tensor  # (B, T, contrastive_dim)
    assignments: np.ndarray  # (B, T, groups) code indices
    probs: np.ndarray  # (B, T, groups, codes) soft probabilities


@dataclass
class ModelOutput:
    z: Tensor
    c: Tensor
    c_proj: Tensor
    q: Tensor
    mask: np.ndarray  # (B, T) bool, masked steps
    g: Tensor
    assignments: np.ndarray


def pool_global(c: Tensor) -> Tensor:
    """Temporal average of contextual features: (B, T, d) -> (B, d), or (T, d) -> (d,)."""
    return ops.mean(c, axis=-2)


def sinusoid_table(n_positions: int, d: int) -> np.ndarray:
    """Sine/cosine position codes, used as the starting point of the learned table.

    A small random table leaves positions invisible next to unit-scale inputs,
    and attention then cannot find neighbouring steps within a short run.
    """
    pos = np.arange(n_positions)[:, None]
    freq = 10000.0 ** (-np.arange(0, d, 2) / d)
    table = np.zeros((n_positions, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: d // 2])
    return table


def _uniform(rng: Rng, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class EcgModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    # -- construction --------------------------------------------------
    @classmethod
    def init(cls, config: ModelConfig, rng: Rng) -> "EcgModel":
        cv, tf, q = config.conv, config.transformer, config.quantizer
        p: dict[str, np.ndarray] = {}
        cin = N_LEADS
        for i in range(cv.n_blocks):
            fan_in = cv.kernel * cin
            p[f"conv.{i}.weight"] = _uniform(rng, 1 / math.sqrt(fan_in), (fan_in, cv.channels))
            p[f"conv.{i}.ln.scale"] = np.ones(cv.channels)
            p[f"conv.{i}.ln.shift"] = np.zeros(cv.channels)
            cin = cv.channels
        ch, d = cv.channels, tf.d_model
        p["mask_emb"] = rng.uniform(-0.1, 0.1, size=ch)
        p["quant.proj.weight"] = _uniform(rng, 1 / math.sqrt(ch), (ch, q.groups * q.codes_per_group))
        p["quant.proj.bias"] = np.zeros(q.groups * q.codes_per_group)
        entry = q.code_dim // q.groups
        p["quant.codebook"] = _uniform(rng, 1 / math.sqrt(entry), (q.groups, q.codes_per_group, entry))
        p["quant.out.weight"] = _uniform(rng, 1 / math.sqrt(q.code_dim), (q.code_dim, q.contrastive_dim))
        p["quant.out.bias"] = np.zeros(q.contrastive_dim)
        p["tf.in.weight"] = _uniform(rng, 1 / math.sqrt(ch), (ch, d))
        p["tf.in.bias"] = np.zeros(d)
        p["tf.pos"] = sinusoid_table(tf.max_positions, d)
        for l in range(tf.layers):
            pre = f"tf.{l}"
            p[f"{pre}.ln1.scale"], p[f"{pre}.ln1.shift"] = np.ones(d), np.zeros(d)
            p[f"{pre}.attn.qkv.weight"] = _uniform(rng, 1 / math.sqrt(d), (d, 3 * d))
            p[f"{pre}.attn.qkv.bias"] = np.zeros(3 * d)
            p[f"{pre}.attn.out.weight"] = _uniform(rng, 1 / math.sqrt(d), (d, d))
            p[f"{pre}.attn.out.bias"] = np.zeros(d)
            p[f"{pre}.ln2.scale"], p[f"{pre}.ln2.shift"] = np.ones(d), np.zeros(d)
            p[f"{pre}.ff1.weight"] = _uniform(rng, 1 / math.sqrt(d), (d, tf.d_ff))
            p[f"{pre}.ff1.bias"] = np.zeros(tf.d_ff)
            p[f"{pre}.ff2.weight"] = _uniform(rng, 1 / math.sqrt(tf.d_ff), (tf.d_ff, d))
            p[f"{pre}.ff2.bias"] = np.zeros(d)
        p["tf.ln_f.scale"], p["tf.ln_f.shift"] = np.ones(d), np.zeros(d)
        p["ctx_proj.weight"] = _uniform(rng, 1 / math.sqrt(d), (d, q.contrastive_dim))
        p["ctx_proj.bias"] = np.zeros(q.contrastive_dim)
        return cls(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()})

    def add_head(self, task: Literal["classification", "identification"], n_out: int, rng: Rng) -> None:
        """Attach a freshly initialized task head, replacing any previous one."""
        d = self.config.transformer.d_model
        if task == "classification":
            self.params["head.cls.weight"] = Tensor(_uniform(rng, 1 / math.sqrt(d), (d, n_out)), True, "head.cls.weight")
            self.params["head.cls.bias"] = Tensor(np.zeros(n_out), True, "head.cls.bias")
        elif task == "identification":
            self.params["head.id.weight"] = Tensor(rng.normal(0.0, 1.0, size=(n_out, d)), True, "head.id.weight")
        else:
            raise ContractError(f"unknown task {task!r}")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    @classmethod
    def from_state(cls, config: ModelConfig, state: dict[str, np.ndarray]) -> "EcgModel":
        reference = cls.init(config, Rng(0)).state_dict()
        for name, arr in reference.items():
            if name not in state:
                raise CheckpointError(f"checkpoint lacks parameter {name}")
            if state[name].shape != arr.shape:
                raise CheckpointError(f"parameter {name} has shape {state[name].shape}, model expects {arr.shape}")
        return cls(config, {k: Tensor(np.array(v), True, k) for k, v in state.items()})

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    # -- encoder -------------------------------------------------------
    def conv_encode(self, x) -> Tensor:
        """(B, 12, L) or (12, L) raw leads -> latents Z of shape (B, T, channels)."""
        x = ops.as_tensor(x)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.ndim != 3 or x.shape[1] != N_LEADS:
            raise ContractError(f"encoder input must be (B, 12, L), got {x.shape}")
        cv = self.config.conv
        if encoded_length(x.shape[2], cv) < 1:
            raise ContractError(f"input of {x.shape[2]} samples is too short for the conv stack")
        h = ops.transpose(x, (0, 2, 1))
        for i in range(cv.n_blocks):
            h = ops.conv1d(h, self._p(f"conv.{i}.weight"), None, cv.kernel, cv.stride)
            h = ops.layer_norm(h, self._p(f"conv.{i}.ln.scale"), self._p(f"conv.{i}.ln.shift"))
            h = ops.gelu(h)
        return h

    # -- masking -------------------------------------------------------
    def sample_time_mask(self, batch: int, steps: int, rng: Rng, p_start: float | None = None) -> np.ndarray:
        return sample_span_mask(batch, steps, self.config.mask.p_start if p_start is None else p_start,
                                self.config.mask.span, rng)

    def apply_time_mask(self, z: Tensor, rng: Rng, p_start: float | None = None) -> tuple[Tensor, np.ndarray]:
        """Replace randomly chosen spans of Z with the learned mask embedding."""
        B, T, _ = z.shape
        mask = self.sample_time_mask(B, T, rng, p_start)
        m = mask[:, :, None].astype(np.float64)
        return z * (1.0 - m) + self._p("mask_emb") * m, mask

    # -- quantizer -----------------------------------------------------
    def quantize(self, z: Tensor, tau: float, rng: Rng | None = None,
                 mode: Literal["train", "eval", "soft"] = "train") -> QuantizerOutput:
        """Gumbel-softmax product quantization of unmasked latents.

        ``train`` forwards hard one-hot codes with straight-through gradients,
        ``eval`` takes the argmax of the logits, ``soft`` forwards the soft
        probabilities themselves (a smooth path for gradient checking).
        """
        if tau <= 0:
            raise ContractError("quantizer temperature must be positive")
        q = self.config.quantizer
        B, T, _ = z.shape
        G, V = q.groups, q.codes_per_group
        logits = (z @ self._p("quant.proj.weight") + self._p("quant.proj.bias")).reshape(B, T, G, V)
        if mode == "eval":
            probs = ops.softmax(logits.detach(), axis=-1).data
            idx = logits.data.argmax(axis=-1)
            onehot = Tensor(np.eye(V)[idx])
        elif mode in ("train", "soft"):
            if rng is None:
                raise ContractError("training-mode quantization needs an Rng for Gumbel noise")
            noisy = logits + rng.gumbel(size=logits.shape)
            soft = ops.softmax(noisy * (1.0 / tau), axis=-1)
            probs = soft.data
            idx = probs.argmax(axis=-1)
            onehot = soft if mode == "soft" else ops.straight_through(np.eye(V)[idx], soft)
        else:
            raise ContractError(f"unknown quantizer mode {mode!r}")
        per_group = ops.transpose(onehot.reshape(B * T, G, V), (1, 0, 2))  # (G, B*T, V)
        codes = per_group @ self._p("quant.codebook")  # (G, B*T, entry)
        codes = ops.transpose(codes, (1, 0, 2)).reshape(B, T, q.code_dim)
        out = codes @ self._p("quant.out.weight") + self._p("quant.out.bias")
        return QuantizerOutput(out, idx, probs)

    # -- transformer ---------------------------------------------------
    def transform(self, z: Tensor, return_attention: bool = False):
        """Z (B, T, channels) -> contextual features C (B, T, d_model)."""
        tf = self.config.transformer
        B, T, _ = z.shape
        if T > tf.max_positions:
            raise ContractError(f"{T} time steps exceed the positional table ({tf.max_positions})")
        d, H = tf.d_model, tf.heads
        dh = d // H
        x = z @ self._p("tf.in.weight") + self._p("tf.in.bias") + self._p("tf.pos")[:T]
        attentions = []
        for l in range(tf.layers):
            pre = f"tf.{l}"
            h = ops.layer_norm(x, self._p(f"{pre}.ln1.scale"), self._p(f"{pre}.ln1.shift"))
            qkv = (h @ self._p(f"{pre}.attn.qkv.weight") + self._p(f"{pre}.attn.qkv.bias")).reshape(B, T, 3, H, dh)
            qkv = ops.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, H, T, dh)
            qh, kh, vh = qkv[0], qkv[1], qkv[2]
            att = ops.softmax((qh @ ops.swap_last(kh)) * (1.0 / math.sqrt(dh)), axis=-1)
            if return_attention:
                attentions.append(att.data)
            o = ops.transpose(att @ vh, (0, 2, 1, 3)).reshape(B, T, d)
            x = x + o @ self._p(f"{pre}.attn.out.weight") + self._p(f"{pre}.attn.out.bias")
            h = ops.layer_norm(x, self._p(f"{pre}.ln2.scale"), self._p(f"{pre}.ln2.shift"))
            ff = ops.gelu(h @ self._p(f"{pre}.ff1.weight") + self._p(f"{pre}.ff1.bias"))
            x = x + ff @ self._p(f"{pre}.ff2.weight") + self._p(f"{pre}.ff2.bias")
        c = ops.layer_norm(x, self._p("tf.ln_f.scale"), self._p("tf.ln_f.shift"))
        return (c, attentions) if return_attention else c

    def project_context(self, c: Tensor) -> Tensor:
        return c @ self._p("ctx_proj.weight") + self._p("ctx_proj.bias")

    # -- heads ---------------------------------------------------------
    def forward_heads(self, g: Tensor, head: Literal["classification", "identification"]):
        """Classification logits, or (normalized embedding, cosine logits) for identification."""
        if head == "classification":
            return g @ self._p("head.cls.weight") + self._p("head.cls.bias")
        if head == "identification":
            emb = ops.l2_normalize(g, axis=-1)
            w = ops.l2_normalize(self._p("head.id.weight"), axis=-1)
            return emb, emb @ ops.swap_last(w)
        raise ContractError(f"unknown head {head!r}")

    # -- composites ----------------------------------------------------
    def embed(self, x) -> Tensor:
        """Pooled global vectors g for raw input, without masking."""
        return pool_global(self.transform(self.conv_encode(x)))

    def pretrain_forward(self, x, tau: float, rng: Rng, quant_mode: Literal["train", "soft"] = "train",
                         p_start: float | None = None) -> ModelOutput:
        z = self.conv_encode(x)
        qo = self.quantize(z, tau, rng.fork(1), quant_mode)
        z_masked, mask = self.apply_time_mask(z, rng.fork(0), p_start)
        c = self.transform(z_masked)
        return ModelOutput(z, c, self.project_context(c), qo.q, mask, pool_global(c), qo.assignments)


def sample_span_mask(batch: int, steps: int, p_start: float, span: int, rng: Rng) -> np.ndarray:
    """Boolean (batch, steps) mask: union of spans [t, t + span) over random starts.

    Each index starts a span with probability ``p_start``. A row left empty
    gets one span at a uniform start so every sample has a target.
    """
    if steps < 1:
        raise ContractError("need at least one time step to mask")
    starts = rng.random((batch, steps)) < p_start
    forced = rng.integers(0, max(1, steps - span + 1), size=batch)
    mask = np.zeros((batch, steps), dtype=bool)
    for offset in range(min(span, steps)):
        mask[:, offset:] |= starts[:, : steps - offset]
    empty = ~mask.any(axis=1)
    for b in np.nonzero(empty)[0]:
        mask[b, forced[b]: forced[b] + span] = True
    return mask
