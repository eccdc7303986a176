"""Particle-cloud transformer encoder with pairwise-interaction attention.

The backbone embeds per-particle features with a 3-layer MLP, runs
pre-norm particle-attention blocks whose logits carry a physics-informed
pairwise bias (a pointwise conv stack over the interaction features, one
channel per head), then pools with class-attention blocks into a single
latent. Attachable heads: linear / two-layer classifier, contrastive
projection head, masked-particle decoder, and a VAE head.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import TensorNode
from .jetdata import (
    LOG_FLOOR_SENTINEL,
    N_CLASSES,
    N_FEATURES,
    N_INTERACTION_FEATURES,
)

NEG_MASK = -1e9  # additive -inf equivalent for padded attention keys


class EncoderError(Exception):
    pass


class ContractViolation(EncoderError):
    """A pretraining head was invoked outside pretraining."""


@dataclass(frozen=True)
class EncoderConfig:
    n_features: int = N_FEATURES
    n_interaction_features: int = N_INTERACTION_FEATURES
    latent_dim: int = 128
    embed_dims: tuple = (512, 512, 128)
    n_particle_blocks: int = 8
    n_class_blocks: int = 2
    n_heads: int = 8
    ffn_expansion: int = 4
    interaction_hidden: int = 64
    interaction_conv_layers: int = 4
    use_geglu: bool = False
    droppath_rate: float = 0.0
    residual_scale: float = 1.0
    wide_readout: bool = False
    readout_hidden: int = 128
    dropout_rate: float = 0.1
    proj_dim: int = 128
    vae_dim: int = 32
    vae_hidden: int = 256
    mpm_hidden: int = 256
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if self.latent_dim % self.n_heads != 0:
            raise EncoderError(
                f"latent_dim {self.latent_dim} not divisible by n_heads {self.n_heads}")
        if self.embed_dims[-1] != self.latent_dim:
            raise EncoderError(
                f"embedding output {self.embed_dims[-1]} must equal latent_dim")
        if self.interaction_conv_layers < 2:
            raise EncoderError("interaction conv stack needs at least 2 layers")

    @property
    def head_dim(self):
        return self.latent_dim // self.n_heads

    def config_hash(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def paper_config(**overrides):
    """The reference backbone: 3-layer 512/512/128 embed, 8+2 blocks, 8 heads."""
    return replace(EncoderConfig(), **overrides) if overrides else EncoderConfig()


def paper_modified_config(**overrides):
    """Reference backbone plus GEGLU, wider FFN, DropPath and two-layer readout."""
    cfg = EncoderConfig(use_geglu=True, ffn_expansion=6, droppath_rate=0.1,
                        residual_scale=0.9, wide_readout=True)
    return replace(cfg, **overrides) if overrides else cfg


def desk_config(**overrides):
    """Scaled-down backbone for desk-size experiments."""
    cfg = EncoderConfig(latent_dim=64, embed_dims=(128, 128, 64),
                        n_particle_blocks=3, n_class_blocks=1, n_heads=4,
                        interaction_hidden=16, proj_dim=64, vae_dim=16,
                        vae_hidden=128, mpm_hidden=128, readout_hidden=64,
                        dropout_rate=0.0)
    return replace(cfg, **overrides) if overrides else cfg


def desk_modified_config(**overrides):
    cfg = replace(desk_config(), use_geglu=True, ffn_expansion=6,
                  droppath_rate=0.05, residual_scale=0.9, wide_readout=True)
    return replace(cfg, **overrides) if overrides else cfg


CONFIG_PRESETS = {
    "paper": paper_config,
    "paper_modified": paper_modified_config,
    "desk": desk_config,
    "desk_modified": desk_modified_config,
}

HEAD_KINDS = ("cls", "proj", "mpm", "vae")
MODES = ("pretrain", "finetune", "supervised")


@dataclass
class EncoderState:
    """All learnable tensors plus the lifecycle mode the heads check."""

    config: EncoderConfig
    params: dict
    mode: str = "supervised"

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    def named_parameters(self):
        return self.params.items()

    def encoder_params(self):
        return {k: v for k, v in self.params.items() if k.startswith("encoder.")}


def _linear_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return TensorNode(rng.uniform(-bound, bound, shape), requires_grad=True)


def init_state(config: EncoderConfig, rng, heads=("cls",), mode="supervised"):
    """Create all backbone parameters plus the requested head parameters."""
    if mode not in MODES:
        raise EncoderError(f"unknown mode {mode!r}")
    for h in heads:
        if h not in HEAD_KINDS:
            raise EncoderError(f"unknown head kind {h!r}")
    cfg = config
    p = {}

    def linear(name, fan_in, fan_out):
        p[f"{name}.w"] = _linear_init(rng, fan_in, (fan_in, fan_out))
        p[f"{name}.b"] = _linear_init(rng, fan_in, (fan_out,))

    def norm(name, dim):
        p[f"{name}.g"] = TensorNode(np.ones(dim), requires_grad=True)
        p[f"{name}.b"] = TensorNode(np.zeros(dim), requires_grad=True)

    dims = [cfg.n_features] + list(cfg.embed_dims)
    for i in range(len(cfg.embed_dims)):
        linear(f"encoder.embed.{i}", dims[i], dims[i + 1])

    conv_dims = ([cfg.n_interaction_features]
                 + [cfg.interaction_hidden] * (cfg.interaction_conv_layers - 1)
                 + [cfg.n_heads])
    for i in range(cfg.interaction_conv_layers):
        linear(f"encoder.inter.{i}", conv_dims[i], conv_dims[i + 1])

    d = cfg.latent_dim
    inner = cfg.ffn_expansion * d

    def block(prefix):
        norm(f"{prefix}.ln1", d)
        for nm in ("q", "k", "v", "o"):
            linear(f"{prefix}.attn.{nm}", d, d)
        norm(f"{prefix}.ln2", d)
        if cfg.use_geglu:
            p[f"{prefix}.ffn.wg"] = _linear_init(rng, d, (d, inner))
            p[f"{prefix}.ffn.wv"] = _linear_init(rng, d, (d, inner))
            linear(f"{prefix}.ffn.out", inner, d)
        else:
            linear(f"{prefix}.ffn.in", d, inner)
            linear(f"{prefix}.ffn.out", inner, d)

    for i in range(cfg.n_particle_blocks):
        block(f"encoder.pblock{i}")
    p["encoder.cls_token"] = TensorNode(rng.normal(0.0, 0.02, (1, 1, d)),
                                        requires_grad=True)
    for i in range(cfg.n_class_blocks):
        block(f"encoder.cblock{i}")
    norm("encoder.final_ln", d)

    if "cls" in heads:
        if cfg.wide_readout:
            linear("head.cls.hidden", d, cfg.readout_hidden)
            linear("head.cls.out", cfg.readout_hidden, cfg.n_classes)
        else:
            linear("head.cls.out", d, cfg.n_classes)
    if "proj" in heads:
        linear("head.proj.hidden", d, cfg.proj_dim)
        linear("head.proj.out", cfg.proj_dim, cfg.proj_dim)
    if "mpm" in heads:
        p["head.mpm.mask_embed"] = TensorNode(rng.normal(0.0, 0.02, (d,)),
                                              requires_grad=True)
        linear("head.mpm.hidden", d, cfg.mpm_hidden)
        linear("head.mpm.out", cfg.mpm_hidden, cfg.n_features)
    if "vae" in heads:
        linear("head.vae.mu", d, cfg.vae_dim)
        linear("head.vae.logvar", d, cfg.vae_dim)
        linear("head.vae.dec_hidden", d + cfg.vae_dim, cfg.vae_hidden)
        linear("head.vae.dec_out", cfg.vae_hidden, cfg.n_features)

    return EncoderState(cfg, p, mode)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def _affine(x, state, name):
    w = state.params[f"{name}.w"]
    b = state.params[f"{name}.b"]
    if x.ndim <= 2:
        return ad.add(ad.matmul(x, w), b)
    # one large GEMM instead of a stack of per-batch GEMMs
    lead = x.shape[:-1]
    flat = ad.reshape(x, (-1, x.shape[-1]))
    out = ad.add(ad.matmul(flat, w), b)
    return ad.reshape(out, lead + (w.shape[-1],))


def _norm(x, state, name):
    return ad.layer_norm(x, state.params[f"{name}.g"], state.params[f"{name}.b"])


def embed_particles(batch, state: EncoderState):
    """Pointwise 3-layer GELU MLP over per-particle features; padding zeroed."""
    cfg = state.config
    if batch.features.shape[-1] != cfg.n_features:
        raise EncoderError(
            f"batch has {batch.features.shape[-1]} features, config expects "
            f"{cfg.n_features}")
    x = TensorNode(batch.features)
    n_layers = len(cfg.embed_dims)
    for i in range(n_layers):
        x = _affine(x, state, f"encoder.embed.{i}")
        if i < n_layers - 1:
            x = ad.gelu(x)
    return ad.mul(x, TensorNode(batch.mask[:, :, None]))


def _pair_index_map(n):
    """Flat [n*n] map onto n*(n-1)/2 upper-triangle slots + 1 diagonal slot."""
    idx = np.empty((n, n), dtype=np.intp)
    iu, ju = np.triu_indices(n, 1)
    slots = np.arange(iu.size)
    idx[iu, ju] = slots
    idx[ju, iu] = slots
    np.fill_diagonal(idx, iu.size)
    return idx.reshape(-1), iu, ju


def embed_interactions(batch, state: EncoderState, interactions=None):
    """Pointwise conv stack mapping pair features to one bias per head.

    The input tensor is symmetric with a constant diagonal, so the conv
    runs on the upper-triangle pairs only and the full matrix is rebuilt
    by gathering; symmetry of the output is exact by construction.
    """
    cfg = state.config
    u = batch.interactions if interactions is None else interactions
    b, _, n, _ = u.shape
    flat_map, iu, ju = _pair_index_map(n)
    per = iu.size + 1
    rows = np.empty((b, per, cfg.n_interaction_features))
    rows[:, :iu.size] = np.moveaxis(u, 1, 3)[:, iu, ju]
    rows[:, iu.size] = u[:, :, 0, 0]  # diagonal sentinel row
    x = TensorNode(rows.reshape(b * per, cfg.n_interaction_features))
    for i in range(cfg.interaction_conv_layers):
        x = _affine(x, state, f"encoder.inter.{i}")
        if i < cfg.interaction_conv_layers - 1:
            x = ad.gelu(x)
    gather = (flat_map[None, :] + per * np.arange(b)[:, None]).reshape(-1)
    x = ad.gather_rows(x, gather)
    x = ad.reshape(x, (b, n, n, cfg.n_heads))
    return ad.transpose(x, (0, 3, 1, 2))


def _attention(x_query, x_kv, key_mask, bias, state, prefix, training, rng):
    """Multi-head attention; padded keys get a -1e9 additive mask."""
    cfg = state.config
    bsz, nq, d = x_query.shape
    nk = x_kv.shape[1]
    h, dh = cfg.n_heads, cfg.head_dim

    def split_heads(x, n):
        x = ad.reshape(x, (bsz, n, h, dh))
        return ad.transpose(x, (0, 2, 1, 3))

    p = state.params
    if x_query is x_kv:
        # self-attention: one fused qkv GEMM
        w = ad.concat([p[f"{prefix}.attn.q.w"], p[f"{prefix}.attn.k.w"],
                       p[f"{prefix}.attn.v.w"]], axis=1)
        b = ad.concat([p[f"{prefix}.attn.q.b"], p[f"{prefix}.attn.k.b"],
                       p[f"{prefix}.attn.v.b"]], axis=0)
        flat = ad.reshape(x_query, (bsz * nq, d))
        qkv = ad.reshape(ad.add(ad.matmul(flat, w), b), (bsz, nq, 3 * d))
        q = split_heads(ad.slice_last(qkv, 0, d), nq)
        k = split_heads(ad.slice_last(qkv, d, 2 * d), nk)
        v = split_heads(ad.slice_last(qkv, 2 * d, 3 * d), nk)
    else:
        q = split_heads(_affine(x_query, state, f"{prefix}.attn.q"), nq)
        k = split_heads(_affine(x_kv, state, f"{prefix}.attn.k"), nk)
        v = split_heads(_affine(x_kv, state, f"{prefix}.attn.v"), nk)

    logits = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                    TensorNode(1.0 / np.sqrt(dh)))
    if bias is not None:
        logits = ad.add(logits, bias)
    mask_add = np.where(key_mask > 0.0, 0.0, NEG_MASK).reshape(bsz, 1, 1, nk)
    logits = ad.add(logits, TensorNode(mask_add))
    att = ad.softmax(logits, axis=-1)
    if training and cfg.dropout_rate > 0.0:
        att = ad.mul(att, TensorNode(
            ad.dropout_mask(att.shape, cfg.dropout_rate, rng, training)))
    out = ad.matmul(att, v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (bsz, nq, d))
    return _affine(out, state, f"{prefix}.attn.o")


def _ffn(x, state, prefix, training, rng):
    cfg = state.config
    if cfg.use_geglu:
        hdn = ad.geglu(x, state.params[f"{prefix}.ffn.wg"],
                       state.params[f"{prefix}.ffn.wv"])
    else:
        hdn = ad.gelu(_affine(x, state, f"{prefix}.ffn.in"))
    if training and cfg.dropout_rate > 0.0:
        hdn = ad.mul(hdn, TensorNode(
            ad.dropout_mask(hdn.shape, cfg.dropout_rate, rng, training)))
    return _affine(hdn, state, f"{prefix}.ffn.out")


def _residual(x, branch, state, training, rng):
    cfg = state.config
    branch = ad.drop_path(branch, cfg.droppath_rate, cfg.residual_scale, rng,
                          bool(training))
    return ad.add(x, branch)


def particle_attention_block(tokens, bias, mask, state, prefix, training, rng=None):
    h = _norm(tokens, state, f"{prefix}.ln1")
    a = _attention(h, h, mask, bias, state, prefix, training, rng)
    tokens = _residual(tokens, a, state, training, rng)
    f = _ffn(_norm(tokens, state, f"{prefix}.ln2"), state, prefix, training, rng)
    return _residual(tokens, f, state, training, rng)


def class_attention_block(cls_token, tokens, mask, state, prefix, training, rng=None):
    """Class token queries [cls; particles]; no interaction bias."""
    bsz = tokens.shape[0]
    kv = ad.concat([cls_token, tokens], axis=1)
    kv_mask = np.concatenate([np.ones((bsz, 1)), mask], axis=1)
    a = _attention(_norm(cls_token, state, f"{prefix}.ln1"),
                   _norm(kv, state, f"{prefix}.ln1"), kv_mask, None,
                   state, prefix, training, rng)
    cls_token = _residual(cls_token, a, state, training, rng)
    f = _ffn(_norm(cls_token, state, f"{prefix}.ln2"), state, prefix, training, rng)
    return _residual(cls_token, f, state, training, rng)


def forward_features(batch, state: EncoderState, training=False, rng=None,
                     mask_plan=None):
    """Full backbone pass; returns (pooled latent [B, D], particle tokens).

    With a mask plan, embedded tokens at masked positions are replaced by
    the learned mask embedding and the masked particles' interaction
    features are blanked to the sentinel, so reconstruction cannot read
    the answer out of the attention bias.
    """
    cfg = state.config
    tokens = embed_particles(batch, state)
    interactions = None
    if mask_plan is not None:
        sel = mask_plan.mask  # [B, N] boolean over real particles
        keep = TensorNode(np.where(sel[:, :, None], 0.0, 1.0))
        inject = np.where(sel[:, :, None], 1.0, 0.0)
        mask_tok = ad.reshape(state.params["head.mpm.mask_embed"], (1, 1, cfg.latent_dim))
        tokens = ad.add(ad.mul(tokens, keep), ad.mul(mask_tok, TensorNode(inject)))
        interactions = batch.interactions.copy()
        for b in range(batch.batch_size):
            idx = np.flatnonzero(sel[b])
            interactions[b, :, idx, :] = LOG_FLOOR_SENTINEL
            interactions[b, :, :, idx] = LOG_FLOOR_SENTINEL
    bias = embed_interactions(batch, state, interactions)
    for i in range(cfg.n_particle_blocks):
        tokens = particle_attention_block(tokens, bias, batch.mask, state,
                                          f"encoder.pblock{i}", training, rng)
    bsz = batch.batch_size
    cls = ad.add(state.params["encoder.cls_token"],
                 TensorNode(np.zeros((bsz, 1, cfg.latent_dim))))
    for i in range(cfg.n_class_blocks):
        cls = class_attention_block(cls, tokens, batch.mask, state,
                                    f"encoder.cblock{i}", training, rng)
    latent = ad.reshape(_norm(cls, state, "encoder.final_ln"), (bsz, cfg.latent_dim))
    return latent, tokens


def forward_encoder(batch, state: EncoderState, training=False, rng=None):
    """Pooled class-token latent [B, latent_dim]."""
    return forward_features(batch, state, training, rng)[0]


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

def forward_classifier(latent, state: EncoderState, training=False, rng=None):
    cfg = state.config
    if cfg.wide_readout:
        hdn = ad.gelu(_affine(latent, state, "head.cls.hidden"))
        if training and cfg.dropout_rate > 0.0:
            hdn = ad.mul(hdn, TensorNode(
                ad.dropout_mask(hdn.shape, cfg.dropout_rate, rng, training)))
        return _affine(hdn, state, "head.cls.out")
    return _affine(latent, state, "head.cls.out")


def projection_head(latent, state: EncoderState):
    """ReLU MLP onto the contrastive sphere (rows unit-norm)."""
    hdn = ad.relu(_affine(latent, state, "head.proj.hidden"))
    return ad.l2_normalize(_affine(hdn, state, "head.proj.out"))


def _require_pretrain(state, head):
    if state.mode == "finetune":
        raise ContractViolation(
            f"{head} is a pretraining head; invoked in fine-tune mode")


def mpm_decoder(masked_tokens, state: EncoderState):
    """Reconstruct per-particle features for the masked tokens [M, F]."""
    _require_pretrain(state, "mpm_decoder")
    hdn = ad.gelu(_affine(masked_tokens, state, "head.mpm.hidden"))
    return _affine(hdn, state, "head.mpm.out")


def vae_head(latent, tokens, mask, state: EncoderState, rng=None, noise=None):
    """(mu, log_var, reconstruction): a VAE on the pooled latent.

    The sampled z is broadcast and concatenated to every particle token; a
    shared per-token MLP reconstructs the particle features. Pass `noise`
    to freeze the reparameterization draw, `rng` to sample it; with
    neither, z = mu.
    """
    _require_pretrain(state, "vae_head")
    cfg = state.config
    mu = _affine(latent, state, "head.vae.mu")
    log_var = _affine(latent, state, "head.vae.logvar")
    if noise is None and rng is not None:
        noise = rng.standard_normal(mu.shape)
    if noise is not None:
        z = ad.add(mu, ad.mul(ad.exp(ad.mul(log_var, TensorNode(0.5))),
                              TensorNode(noise)))
    else:
        z = mu
    bsz, n, d = tokens.shape
    z3 = ad.reshape(z, (bsz, 1, cfg.vae_dim))
    z_tiled = ad.add(z3, TensorNode(np.zeros((bsz, n, cfg.vae_dim))))
    joined = ad.concat([tokens, z_tiled], axis=2)
    flat = ad.reshape(joined, (bsz * n, d + cfg.vae_dim))
    hdn = ad.gelu(_affine(flat, state, "head.vae.dec_hidden"))
    recon = ad.reshape(_affine(hdn, state, "head.vae.dec_out"),
                       (bsz, n, cfg.n_features))
    return mu, log_var, recon


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"JRCK"
_CKPT_VERSION = 1


def save_checkpoint(path, state: EncoderState, extra_arrays=None, meta=None):
    """Binary checkpoint: meta header + named (shape, f64 payload) table."""
    arrays = {name: node.values for name, node in state.params.items()}
    if extra_arrays:
        arrays.update(extra_arrays)
    header = {
        "config": asdict(state.config),
        "config_hash": state.config.config_hash(),
        "mode": state.mode,
    }
    if meta:
        header["meta"] = meta
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<HI", _CKPT_VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            nm = name.encode()
            f.write(struct.pack("<H", len(nm)))
            f.write(nm)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    """Returns (header dict, {name: array})."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _CKPT_MAGIC:
        raise EncoderError(f"{path} is not a checkpoint file")
    version, blob_len = struct.unpack_from("<HI", data, 4)
    if version != _CKPT_VERSION:
        raise EncoderError(f"unsupported checkpoint version {version}")
    off = 10
    header = json.loads(data[off:off + blob_len].decode())
    off += blob_len
    (n_arrays,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count,
                                     offset=off).reshape(shape).copy()
        off += count * 8
    return header, arrays


def load_params_into(state: EncoderState, arrays, prefix="encoder."):
    """Copy arrays into matching state params, verifying the shape table exactly."""
    expected = {k: v for k, v in state.params.items() if k.startswith(prefix)}
    provided = {k: v for k, v in arrays.items() if k.startswith(prefix)}
    missing = sorted(set(expected) - set(provided))
    if missing:
        raise EncoderError(f"checkpoint missing parameters: {missing[:5]}")
    for name, node in expected.items():
        arr = provided[name]
        if arr.shape != node.values.shape:
            raise EncoderError(
                f"shape mismatch for {name}: checkpoint {arr.shape} vs "
                f"model {node.values.shape}")
        node.values = arr.astype(np.float64).copy()
        node.grad = None
