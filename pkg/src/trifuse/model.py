"""Network pieces: modality encoders, gated fusion, residual injection, heads.

The text stream goes through a deliberately weak mixing stub (per-token MLP
plus a learned positional bias) so synthetic data can make any modality
dominant. Acoustic and visual streams are encoded into a mean and a
softplus-constrained variance and sampled with the reparameterization trick;
the sampled latents are fused and injected back into the text stream as a
residual shift before the task head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

# Shared small constant: inside the reparameterization sqrt, the layer-norm
# denominator, and the entropy log.
EPS_SMALL = 1e-6

CHECKPOINT_VERSION = 1

PARAM_GROUPS = (
    "text_stub",
    "enc_a",
    "enc_v",
    "fusion",
    "task_head",
    "dec_a",
    "dec_v",
    "uni_heads",
)

FUSION_KINDS = ("gated", "concat-mlp")


@dataclass
class ModelConfig:
    """Shapes and knobs for the full network.

    Defaults are desk-scale; the reference configuration used 256/512 for the
    intermediate/fusion widths and sequences of length 50.
    """

    d_t: int = 12
    d_a: int = 8
    d_v: int = 6
    d_latent: int = 16
    d_fusion: int = 32
    seq_len: int = 8
    beta: float = 1.0
    dropout_enc: float = 0.3
    dropout_head: float = 0.5
    fusion_kind: str = "gated"

    def __post_init__(self):
        for name in ("d_t", "d_a", "d_v", "d_latent", "d_fusion", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not np.isfinite(self.beta):
            raise ValueError("beta must be finite")
        for name in ("dropout_enc", "dropout_head"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.fusion_kind not in FUSION_KINDS:
            raise ValueError(f"fusion_kind must be one of {FUSION_KINDS}")


class ModelParams:
    """Named tensor registry partitioned into disjoint groups.

    Groups ``enc_a`` and ``enc_v`` are the targets of gradient scaling.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._groups: dict[str, list[str]] = {g: [] for g in PARAM_GROUPS}

    def add(self, group: str, name: str, values: np.ndarray) -> Tensor:
        if group not in self._groups:
            raise ContractError(f"unknown parameter group '{group}'")
        if name in self._tensors:
            raise ContractError(f"duplicate parameter name '{name}'")
        t = Tensor(values)
        self._tensors[name] = t
        self._groups[group].append(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def items(self) -> list[tuple[str, Tensor]]:
        return list(self._tensors.items())

    def group(self, group: str) -> list[Tensor]:
        if group not in self._groups:
            raise ContractError(f"unknown parameter group '{group}'")
        return [self._tensors[n] for n in self._groups[group]]

    def group_names(self, group: str) -> list[str]:
        return list(self._groups[group])

    def group_of(self, name: str) -> str:
        for g, names in self._groups.items():
            if name in names:
                return g
        raise ContractError(f"parameter '{name}' not registered")

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def n_params(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def copy_values(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for n, v in values.items():
            self._tensors[n].data = np.asarray(v, dtype=np.float64)

    # -- checkpoint file ----------------------------------------------------

    def save(self, path) -> None:
        """Versioned JSON checkpoint: name -> group, shape, row-major values."""
        doc = {
            "format_version": CHECKPOINT_VERSION,
            "params": {
                name: {
                    "group": self.group_of(name),
                    "shape": list(t.shape),
                    "values": t.data.reshape(-1).tolist(),
                }
                for name, t in self._tensors.items()
            },
        }
        with open(path, "w") as f:
            json.dump(doc, f, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path) as f:
            doc = json.load(f)
        if doc.get("format_version") != CHECKPOINT_VERSION:
            raise ContractError(
                f"unsupported checkpoint format_version {doc.get('format_version')!r}"
            )
        params = cls()
        for name, entry in doc["params"].items():
            values = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
            params.add(entry["group"], name, values)
        return params


def _init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Fresh parameters for ``cfg``. Weights ~ N(0, 1/fan_in), zero biases."""
    p = ModelParams()
    zeros = lambda *shape: np.zeros(shape)

    # Text stub: per-token MLP plus learned positional bias.
    p.add("text_stub", "text_stub.w1", _init(rng, cfg.d_t, (cfg.d_t, cfg.d_t)))
    p.add("text_stub", "text_stub.b1", zeros(cfg.d_t))
    p.add("text_stub", "text_stub.w2", _init(rng, cfg.d_t, (cfg.d_t, cfg.d_t)))
    p.add("text_stub", "text_stub.b2", zeros(cfg.d_t))
    p.add("text_stub", "text_stub.pos", _init(rng, cfg.d_t, (cfg.seq_len, cfg.d_t)))

    # Modality encoders: shared trunk, mean head, variance head.
    for grp, d_in in (("enc_a", cfg.d_a), ("enc_v", cfg.d_v)):
        p.add(grp, f"{grp}.trunk_w", _init(rng, d_in, (d_in, cfg.d_latent)))
        p.add(grp, f"{grp}.trunk_b", zeros(cfg.d_latent))
        p.add(grp, f"{grp}.mu_w", _init(rng, cfg.d_latent, (cfg.d_latent, cfg.d_latent)))
        p.add(grp, f"{grp}.mu_b", zeros(cfg.d_latent))
        p.add(grp, f"{grp}.var_w", _init(rng, cfg.d_latent, (cfg.d_latent, cfg.d_latent)))
        p.add(grp, f"{grp}.var_b", zeros(cfg.d_latent))

    if cfg.fusion_kind == "gated":
        p.add("fusion", "fusion.gate_w", _init(rng, 2 * cfg.d_latent, (2 * cfg.d_latent, cfg.d_fusion)))
        p.add("fusion", "fusion.gate_b", zeros(cfg.d_fusion))
        p.add("fusion", "fusion.a_w", _init(rng, cfg.d_latent, (cfg.d_latent, cfg.d_fusion)))
        p.add("fusion", "fusion.a_b", zeros(cfg.d_fusion))
        p.add("fusion", "fusion.v_w", _init(rng, cfg.d_latent, (cfg.d_latent, cfg.d_fusion)))
        p.add("fusion", "fusion.v_b", zeros(cfg.d_fusion))
    else:
        p.add("fusion", "fusion.mlp_w1", _init(rng, 2 * cfg.d_latent, (2 * cfg.d_latent, cfg.d_fusion)))
        p.add("fusion", "fusion.mlp_b1", zeros(cfg.d_fusion))
        p.add("fusion", "fusion.mlp_w2", _init(rng, cfg.d_fusion, (cfg.d_fusion, cfg.d_fusion)))
        p.add("fusion", "fusion.mlp_b2", zeros(cfg.d_fusion))
    p.add("fusion", "fusion.proj_w", _init(rng, cfg.d_fusion, (cfg.d_fusion, cfg.d_t)))
    p.add("fusion", "fusion.proj_b", zeros(cfg.d_t))

    p.add("task_head", "task_head.w1", _init(rng, cfg.d_t, (cfg.d_t, cfg.d_t)))
    p.add("task_head", "task_head.b1", zeros(cfg.d_t))
    p.add("task_head", "task_head.w2", _init(rng, cfg.d_t, (cfg.d_t, 1)))
    p.add("task_head", "task_head.b2", zeros(1))

    for grp, d_out in (("dec_a", cfg.d_a), ("dec_v", cfg.d_v)):
        p.add(grp, f"{grp}.w1", _init(rng, cfg.d_latent, (cfg.d_latent, cfg.d_latent)))
        p.add(grp, f"{grp}.b1", zeros(cfg.d_latent))
        p.add(grp, f"{grp}.w2", _init(rng, cfg.d_latent, (cfg.d_latent, d_out)))
        p.add(grp, f"{grp}.b2", zeros(d_out))

    p.add("uni_heads", "uni_heads.t_w", _init(rng, cfg.d_t, (cfg.d_t, 1)))
    p.add("uni_heads", "uni_heads.t_b", zeros(1))
    p.add("uni_heads", "uni_heads.a_w", _init(rng, cfg.d_latent, (cfg.d_latent, 1)))
    p.add("uni_heads", "uni_heads.a_b", zeros(1))
    p.add("uni_heads", "uni_heads.v_w", _init(rng, cfg.d_latent, (cfg.d_latent, 1)))
    p.add("uni_heads", "uni_heads.v_b", zeros(1))
    return p


@dataclass
class ForwardOutputs:
    mu_a: Tensor
    var_a: Tensor
    mu_v: Tensor
    var_v: Tensor
    z_a: Tensor
    z_v: Tensor
    f_av: Tensor
    p_av: Tensor
    h: Tensor
    y_hat: Tensor
    a_hat: Tensor
    v_hat: Tensor
    y_uni_t: Tensor
    y_uni_a: Tensor
    y_uni_v: Tensor
    t_enc: Tensor | None = None


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rng is None (evaluation) or rate 0."""
    if rng is None or rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, Tensor(mask))


def text_stub_forward(t_raw: Tensor, params: ModelParams,
                      dropout_rate: float = 0.0,
                      rng: np.random.Generator | None = None) -> Tensor:
    """Per-token MLP + learned positional bias, preserving B x L x d_t."""
    h = ad.relu(ad.matmul(t_raw, params["text_stub.w1"]) + params["text_stub.b1"])
    h = dropout(h, dropout_rate, rng)
    out = ad.matmul(h, params["text_stub.w2"]) + params["text_stub.b2"]
    return out + params["text_stub.pos"]


def ame_forward(x: Tensor, params: ModelParams, group: str,
                noise: Tensor | None,
                dropout_rate: float = 0.0,
                rng: np.random.Generator | None = None,
                detach_var: bool = False) -> tuple[Tensor, Tensor, Tensor]:
    """Encode a modality into (mu, var, z).

    z = mu + noise * sqrt(var + EPS_SMALL); pass noise=None for the
    deterministic mean path (evaluation, or the encoder-sampling ablation,
    which also detaches the variance head from the graph).
    """
    trunk = ad.relu(ad.matmul(x, params[f"{group}.trunk_w"]) + params[f"{group}.trunk_b"])
    trunk = dropout(trunk, dropout_rate, rng)
    mu = ad.matmul(trunk, params[f"{group}.mu_w"]) + params[f"{group}.mu_b"]
    var = ad.softplus(ad.matmul(trunk, params[f"{group}.var_w"]) + params[f"{group}.var_b"])
    if detach_var:
        var = var.detach()
    if noise is None:
        z = mu
    else:
        z = mu + ad.mul(noise, ad.sqrt(var + EPS_SMALL))
    return mu, var, z


def gated_fuse(z_a: Tensor, z_v: Tensor, params: ModelParams) -> Tensor:
    """Gated multimodal unit: g * tanh(W_a z_a) + (1 - g) * tanh(W_v z_v)."""
    both = ad.concat([z_a, z_v], axis=-1)
    g = ad.sigmoid(ad.matmul(both, params["fusion.gate_w"]) + params["fusion.gate_b"])
    ha = ad.tanh(ad.matmul(z_a, params["fusion.a_w"]) + params["fusion.a_b"])
    hv = ad.tanh(ad.matmul(z_v, params["fusion.v_w"]) + params["fusion.v_b"])
    return ad.mul(g, ha) + ad.mul(1.0 - g, hv)


def concat_mlp_fuse(z_a: Tensor, z_v: Tensor, params: ModelParams) -> Tensor:
    both = ad.concat([z_a, z_v], axis=-1)
    h = ad.relu(ad.matmul(both, params["fusion.mlp_w1"]) + params["fusion.mlp_b1"])
    return ad.tanh(ad.matmul(h, params["fusion.mlp_w2"]) + params["fusion.mlp_b2"])


def fuse(z_a: Tensor, z_v: Tensor, params: ModelParams, kind: str) -> Tensor:
    if kind == "gated":
        return gated_fuse(z_a, z_v, params)
    if kind == "concat-mlp":
        return concat_mlp_fuse(z_a, z_v, params)
    raise ContractError(f"unknown fusion kind '{kind}'")


def residual_inject(t: Tensor, f_av: Tensor, beta: float,
                    params: ModelParams) -> tuple[Tensor, Tensor]:
    """Project the fused block to the text width and shift: h = t + beta * p."""
    p_av = ad.tanh(ad.matmul(f_av, params["fusion.proj_w"]) + params["fusion.proj_b"])
    h = t + ad.mul(beta, p_av)
    return p_av, h


def layer_norm(x: Tensor) -> Tensor:
    """Parameter-free normalization over the feature (last) axis."""
    mu = ad.mean(x, axis=-1, keepdims=True)
    var = ad.variance(x, axis=-1, keepdims=True)
    return ad.div(x - mu, ad.sqrt(var + EPS_SMALL))


def masked_mean_pool(x: Tensor, mask: np.ndarray | None) -> Tensor:
    """Mean over the sequence axis; masked positions excluded when given."""
    if mask is None:
        return ad.mean(x, axis=1)
    m = Tensor(mask[:, :, None])
    total = ad.reduce_sum(ad.mul(x, m), axis=1)
    count = Tensor(np.maximum(mask.sum(axis=1), 1.0)[:, None])
    return ad.div(total, count)


def predict_head(h: Tensor, params: ModelParams,
                 dropout_rate: float = 0.0,
                 rng: np.random.Generator | None = None,
                 mask: np.ndarray | None = None) -> Tensor:
    """Layer-norm, pool over the sequence, 2-layer head -> one scalar/sample."""
    pooled = masked_mean_pool(layer_norm(h), mask)
    hid = ad.relu(ad.matmul(pooled, params["task_head.w1"]) + params["task_head.b1"])
    hid = dropout(hid, dropout_rate, rng)
    out = ad.matmul(hid, params["task_head.w2"]) + params["task_head.b2"]
    return ad.reshape(out, (out.shape[0],))


def reconstruct(z: Tensor, params: ModelParams, group: str) -> Tensor:
    """2-layer MLP decoder back to the modality's input width."""
    h = ad.relu(ad.matmul(z, params[f"{group}.w1"]) + params[f"{group}.b1"])
    return ad.matmul(h, params[f"{group}.w2"]) + params[f"{group}.b2"]


def unimodal_predict(x: Tensor, params: ModelParams, modality: str,
                     mask: np.ndarray | None = None) -> Tensor:
    """Pool over the sequence then a linear head; one scalar per sample."""
    pooled = masked_mean_pool(x, mask)
    out = ad.matmul(pooled, params[f"uni_heads.{modality}_w"]) + params[f"uni_heads.{modality}_b"]
    return ad.reshape(out, (out.shape[0],))


def full_forward(params: ModelParams, cfg: ModelConfig,
                 t_raw: Tensor, a: Tensor, v: Tensor,
                 noise_a: Tensor | None = None,
                 noise_v: Tensor | None = None,
                 dropout_rng: np.random.Generator | None = None,
                 mask: np.ndarray | None = None,
                 detach_var: bool = False) -> ForwardOutputs:
    """One pass through the whole network.

    Training passes fresh N(0, I) noise tensors and a dropout rng; evaluation
    passes neither, which yields the deterministic z = mu path.
    """
    enc_rate = cfg.dropout_enc if dropout_rng is not None else 0.0
    head_rate = cfg.dropout_head if dropout_rng is not None else 0.0

    t_enc = text_stub_forward(t_raw, params, enc_rate, dropout_rng)
    mu_a, var_a, z_a = ame_forward(a, params, "enc_a", noise_a, enc_rate, dropout_rng, detach_var)
    mu_v, var_v, z_v = ame_forward(v, params, "enc_v", noise_v, enc_rate, dropout_rng, detach_var)

    f_av = fuse(z_a, z_v, params, cfg.fusion_kind)
    p_av, h = residual_inject(t_enc, f_av, cfg.beta, params)
    y_hat = predict_head(h, params, head_rate, dropout_rng, mask)

    a_hat = reconstruct(z_a, params, "dec_a")
    v_hat = reconstruct(z_v, params, "dec_v")

    y_uni_t = unimodal_predict(t_enc, params, "t", mask)
    y_uni_a = unimodal_predict(z_a, params, "a", mask)
    y_uni_v = unimodal_predict(z_v, params, "v", mask)

    return ForwardOutputs(
        mu_a=mu_a, var_a=var_a, mu_v=mu_v, var_v=var_v,
        z_a=z_a, z_v=z_v, f_av=f_av, p_av=p_av, h=h, y_hat=y_hat,
        a_hat=a_hat, v_hat=v_hat,
        y_uni_t=y_uni_t, y_uni_a=y_uni_a, y_uni_v=y_uni_v,
        t_enc=t_enc,
    )


def draw_noise(rng: np.random.Generator, batch: int, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """N(0, I) reparameterization noise for both encoded modalities."""
    shape = (batch, cfg.seq_len, cfg.d_latent)
    return Tensor(rng.standard_normal(shape)), Tensor(rng.standard_normal(shape))
