"""Spiking diffusion transformer: embeddings, spiking blocks, final layer."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import BadParam, OutOfRange, ShapeMismatch, StaleState
from .rwkv import ChannelMixParams, TimeMixParams, channel_mixing, time_mixing
from .spiking import LifConfig, LifState, lif_step, reset_state
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 8
    channels: int = 1
    patch_size: int = 2
    hidden_dim: int = 32
    num_input_blocks: int = 1
    num_mid_blocks: int = 1
    num_output_blocks: int = 1
    spike_steps: int = 2
    d_ff_mult: int = 4
    diffusion_steps: int = 50
    use_recon: bool = True
    lif: LifConfig = field(default_factory=LifConfig)

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise BadParam(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.num_output_blocks != self.num_input_blocks:
            raise BadParam("output blocks must pair one-to-one with input blocks")
        if self.spike_steps < 1 or self.hidden_dim < 1 or self.diffusion_steps < 1:
            raise BadParam("spike_steps, hidden_dim and diffusion_steps must be >= 1")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    @property
    def d_ff(self) -> int:
        return self.d_ff_mult * self.hidden_dim

    @property
    def num_blocks(self) -> int:
        return self.num_input_blocks + self.num_mid_blocks + self.num_output_blocks

    def to_dict(self) -> dict:
        out = {k: v for k, v in dataclasses.asdict(self).items() if k != "lif"}
        out.update({f"lif.{k}": v for k, v in dataclasses.asdict(self.lif).items()})
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        lif = {k[4:]: d.pop(k) for k in list(d) if k.startswith("lif.")}
        return cls(**d, lif=LifConfig(**lif))


PRESETS = {
    "desk": ModelConfig(),
    # 28x28 grayscale, 2/1/2 blocks, D=384, T=4; patch size is an assumption
    "mnist": ModelConfig(image_size=28, channels=1, patch_size=2, hidden_dim=384,
                         num_input_blocks=2, num_mid_blocks=1, num_output_blocks=2,
                         spike_steps=4, diffusion_steps=1000),
    "cifar": ModelConfig(image_size=32, channels=3, patch_size=2, hidden_dim=512,
                         num_input_blocks=4, num_mid_blocks=1, num_output_blocks=4,
                         spike_steps=4, diffusion_steps=1000),
}


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    tmix: TimeMixParams
    cmix: ChannelMixParams
    recon_d: Tensor  # [D, N]
    recon_n: Tensor  # [N, D]

    @classmethod
    def init(cls, rng, cfg: ModelConfig) -> "BlockParams":
        d, n = cfg.hidden_dim, cfg.num_patches
        return cls(
            ln1_g=tn.parameter(np.ones(d)), ln1_b=tn.parameter(np.zeros(d)),
            ln2_g=tn.parameter(np.ones(d)), ln2_b=tn.parameter(np.zeros(d)),
            tmix=TimeMixParams.init(rng, d),
            cmix=ChannelMixParams.init(rng, d, cfg.d_ff),
            recon_d=tn.parameter(rng.normal(0.0, 1e-3, (d, n))),
            recon_n=tn.parameter(rng.normal(0.0, 1e-3, (n, d))),
        )


def _identity_kernel(c: int) -> np.ndarray:
    w = np.zeros((c, c, 3, 3))
    w[np.arange(c), np.arange(c), 1, 1] = 1.0
    return w


def _walk(obj, prefix):
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}")


@dataclass(eq=False)
class SditModel:
    config: ModelConfig
    patch_w: Tensor
    patch_b: Tensor
    pos_embed: Tensor
    time_w1: Tensor
    time_b1: Tensor
    time_w2: Tensor
    time_b2: Tensor
    blocks: list[BlockParams]
    recon_tokens: list[Tensor]  # each [1, N, D]
    skip_projs: list[Tensor]  # each [2D, D], one per output block
    final_w: Tensor
    final_b: Tensor
    conv_w: Tensor
    conv_b: Tensor

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "SditModel":
        d, n, pd, c = cfg.hidden_dim, cfg.num_patches, cfg.patch_dim, cfg.channels
        p = tn.parameter
        model = cls(
            config=cfg,
            patch_w=p(rng.normal(0.0, 1.0 / math.sqrt(pd), (pd, d))),
            patch_b=p(np.zeros(d)),
            pos_embed=p(rng.normal(0.0, 0.02, (n, d))),
            time_w1=p(rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))),
            time_b1=p(np.zeros(d)),
            time_w2=p(rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))),
            time_b2=p(np.zeros(d)),
            blocks=[BlockParams.init(rng, cfg) for _ in range(cfg.num_blocks)],
            recon_tokens=[p(rng.normal(0.0, 0.02, (1, n, d))) for _ in range(cfg.num_blocks)],
            skip_projs=[p(rng.normal(0.0, 1.0 / math.sqrt(2 * d), (2 * d, d)))
                        for _ in range(cfg.num_output_blocks)],
            final_w=p(rng.normal(0.0, 0.02, (d, pd))),
            final_b=p(np.zeros(pd)),
            conv_w=p(_identity_kernel(c)),
            conv_b=p(np.zeros(c)),
        )
        if not cfg.use_recon:
            model.zero_recon()
        return model

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for f in dataclasses.fields(self):
            if f.name != "config":
                out.extend(_walk(getattr(self, f.name), f.name))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def frozen_names(self) -> set[str]:
        """Parameters the optimizer must leave alone (the ablated recon maps)."""
        if self.config.use_recon:
            return set()
        return {name for name, _ in self.named_parameters()
                if name.endswith(".recon_d") or name.endswith(".recon_n")}

    def zero_recon(self) -> None:
        for bp in self.blocks:
            bp.recon_d = tn.parameter(np.zeros_like(bp.recon_d.data))
            bp.recon_n = tn.parameter(np.zeros_like(bp.recon_n.data))

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def __call__(self, x_t, t, state=None) -> Tensor:
        return model_forward(self, x_t, t, state=state)


class NetworkState:
    """Membrane potentials for every LIF layer of one forward pass."""

    def __init__(self, num_blocks: int):
        self.lif = [(LifState(), LifState()) for _ in range(num_blocks)]

    @property
    def is_fresh(self) -> bool:
        return all(s.step_index == 0 for pair in self.lif for s in pair)

    def reset(self, cfg: LifConfig) -> None:
        for pair in self.lif:
            for s in pair:
                reset_state(s, cfg)


@dataclass
class ForwardProbe:
    """Instrumentation hooks for a single forward pass.

    ``skip_markers[i]`` is added to the skip-branch copy of input block i's
    output; ``skip_inputs[j]`` records what output block j received as its
    skip on the last spike step.
    """

    skip_markers: dict[int, float] = field(default_factory=dict)
    skip_inputs: dict[int, np.ndarray] = field(default_factory=dict)
    step_outputs: list[np.ndarray] = field(default_factory=list)
    spikes: list[np.ndarray] = field(default_factory=list)


# ----------------------------------------------------------------- embeddings


def patchify(x: Tensor, p: int) -> Tensor:
    b, c, h, w = x.shape
    t = tn.reshape(x, (b, c, h // p, p, w // p, p))
    t = tn.permute(t, (0, 2, 4, 3, 5, 1))
    return tn.reshape(t, (b, (h // p) * (w // p), p * p * c))


def unpatchify(tokens: Tensor, p: int, c: int) -> Tensor:
    b, n, _ = tokens.shape
    g = math.isqrt(n)
    t = tn.reshape(tokens, (b, g, g, p, p, c))
    t = tn.permute(t, (0, 5, 1, 3, 2, 4))
    return tn.reshape(t, (b, c, g * p, g * p))


def patch_embed(x0: Tensor, model: SditModel) -> Tensor:
    cfg = model.config
    if x0.ndim != 4 or x0.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ShapeMismatch(f"expected [B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}], got {x0.shape}")
    return patchify(x0, cfg.patch_size) @ model.patch_w + model.patch_b + model.pos_embed


def sinusoidal(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(emb), 1))], axis=-1)
    return emb


def timestep_embed(t, model: SditModel) -> Tensor:
    """Diffusion step(s) -> ``[D]`` for a scalar step, ``[B, D]`` for an array."""
    cfg = model.config
    scalar = np.ndim(t) == 0
    steps = np.atleast_1d(np.asarray(t))
    if np.any(steps < 0) or np.any(steps >= cfg.diffusion_steps):
        raise OutOfRange(f"timestep outside [0, {cfg.diffusion_steps})")
    freq = tn.Tensor(sinusoidal(steps, cfg.hidden_dim))
    h = tn.silu(freq @ model.time_w1 + model.time_b1)
    emb = h @ model.time_w2 + model.time_b2
    return tn.reshape(emb, (cfg.hidden_dim,)) if scalar else emb


# --------------------------------------------------------------------- blocks


def skip_merge(x: Tensor, x_skip: Tensor | None, w_skip: Tensor | None) -> Tensor:
    if x_skip is None:
        return x
    if x_skip.shape != x.shape:
        raise ShapeMismatch(f"skip {x_skip.shape} vs {x.shape}")
    return tn.concat([x, x_skip], axis=-1) @ w_skip


def reconstruction_apply(x_ffn: Tensor, bp: BlockParams, enabled: bool = True) -> Tensor:
    n = bp.recon_d.shape[1]
    if x_ffn.ndim != 3 or x_ffn.shape[1] != 2 * n:
        raise ShapeMismatch(f"expected {2 * n} tokens, got {x_ffn.shape}")
    y, z = tn.split(x_ffn, 1, [n, n])
    if not enabled:
        return y
    z_d = z @ bp.recon_d  # [B, N, N]
    z_n = tn.transpose(z_d) @ bp.recon_n  # [B, N, D]
    return y + z_n * y


def block_forward(
    x: Tensor,
    x_skip: Tensor | None,
    bp: BlockParams,
    z: Tensor,
    w_skip: Tensor | None,
    states: tuple[LifState, LifState],
    lif: LifConfig,
    use_recon: bool = True,
    probe: ForwardProbe | None = None,
) -> Tensor:
    x = skip_merge(x, x_skip, w_skip)
    tokens = tn.broadcast_to(z, (x.shape[0],) + tuple(z.shape[1:]))
    xh = tn.concat([x, tokens], axis=1)

    s1 = lif_step(time_mixing(tn.layer_norm(xh, bp.ln1_g, bp.ln1_b), bp.tmix), states[0], lif)
    x_attn = xh + s1
    s2 = lif_step(channel_mixing(tn.layer_norm(x_attn, bp.ln2_g, bp.ln2_b), bp.cmix), states[1], lif)
    x_ffn = x_attn + s2
    if probe is not None:
        probe.spikes.extend([s1.data, s2.data])
    return reconstruction_apply(x_ffn, bp, use_recon)


def final_layer(h: Tensor, model: SditModel) -> Tensor:
    cfg = model.config
    img = unpatchify(h @ model.final_w + model.final_b, cfg.patch_size, cfg.channels)
    return tn.conv3x3(img, model.conv_w, model.conv_b)


def model_forward(
    model: SditModel,
    x_t,
    t,
    state: NetworkState | None = None,
    probe: ForwardProbe | None = None,
) -> Tensor:
    """Predicted noise, averaged over the spike steps."""
    cfg = model.config
    x_t = tn.as_tensor(x_t)
    bsz = x_t.shape[0]
    steps = np.broadcast_to(np.asarray(t), (bsz,))
    if state is None:
        state = NetworkState(cfg.num_blocks)
    elif not state.is_fresh:
        raise StaleState("LIF states must be reset before a forward pass")

    temb = tn.reshape(timestep_embed(steps, model), (bsz, 1, cfg.hidden_dim))
    tokens = patch_embed(x_t, model)
    tokens = tokens + tn.broadcast_to(temb, tokens.shape)

    n_in, n_mid = cfg.num_input_blocks, cfg.num_mid_blocks
    acc = None
    for _ in range(cfg.spike_steps):
        h, skips = tokens, []
        for i in range(cfg.num_blocks):
            x_skip = w_skip = None
            j = i - n_in - n_mid
            if j >= 0:
                x_skip, w_skip = skips.pop(), model.skip_projs[j]
                if probe is not None:
                    probe.skip_inputs[j] = x_skip.data
            h = block_forward(h, x_skip, model.blocks[i], model.recon_tokens[i], w_skip,
                              state.lif[i], cfg.lif, cfg.use_recon, probe)
            if i < n_in:
                marker = probe.skip_markers.get(i) if probe is not None else None
                skips.append(h if marker is None else h + marker)
        out = final_layer(h, model)
        if probe is not None:
            probe.step_outputs.append(out.data)
        acc = out if acc is None else acc + out
    return acc * (1.0 / cfg.spike_steps)


# ------------------------------------------------------------------- counting


def count_params(cfg: ModelConfig) -> int:
    d, n, pd, c, ff = cfg.hidden_dim, cfg.num_patches, cfg.patch_dim, cfg.channels, cfg.d_ff
    embed = pd * d + d + n * d + 2 * (d * d + d)
    block = 4 * d + (4 * d * d + 5 * d) + (d * d + 2 * d * ff + 2 * d) + 2 * n * d
    per_block = block + n * d  # plus its reconstruction token
    head = d * pd + pd + 9 * c * c + c
    return embed + cfg.num_blocks * per_block + cfg.num_output_blocks * 2 * d * d + head


def count_macs(cfg: ModelConfig) -> dict[str, int]:
    """Multiply-accumulates of the dense maps and the conv for one image.

    Embeddings run once; blocks and the final layer run every spike step.
    Elementwise products, layer norms and the WKV scan are not counted.
    """
    d, n, pd, c, ff = cfg.hidden_dim, cfg.num_patches, cfg.patch_dim, cfg.channels, cfg.d_ff
    h = cfg.image_size
    embed = n * pd * d + 2 * d * d
    block = 4 * (2 * n) * d * d + (2 * n) * (d * d + 2 * d * ff) + 2 * n * n * d
    skip = n * 2 * d * d
    head = n * d * pd + h * h * c * c * 9
    per_step = cfg.num_blocks * block + cfg.num_output_blocks * skip + head
    return {"embed": embed, "per_spike_step": per_step,
            "total": embed + cfg.spike_steps * per_step}


def count_params_macs(model_or_cfg) -> tuple[int, int]:
    """(exact parameter count, total MACs over all spike steps)."""
    if isinstance(model_or_cfg, SditModel):
        n_params = sum(t.data.size for t in model_or_cfg.parameters())
        cfg = model_or_cfg.config
    else:
        cfg = model_or_cfg
        n_params = count_params(cfg)
    return n_params, count_macs(cfg)["total"]
