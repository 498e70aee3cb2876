"""The three bilingual transducer architectures over one shared trunk.

All variants share a unidirectional LSTM encoder and an autoregressive
prediction network. They differ in the joint path:

* ``vanilla``          — one joint network, softmax over the combined set.
* ``multisoftmax``     — per-language joint networks; the two posteriors are
                         scaled by fixed equal weights and concatenated.
* ``multisoftmax_attn``— per-language joints whose posteriors are scaled by
                         per-frame language weights estimated from the
                         encoder via windowed self-attention, then
                         concatenated.

Weights are a function of the frame only (constant across label positions),
and with a finite look-ahead L the weight at frame t reads frames <= t+L,
keeping the model streaming.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .corpus import CombinedTable

ARCHITECTURES = ("vanilla", "multisoftmax", "multisoftmax_attn")

MASK_NEG = -1e30  # finite stand-in for -inf: exp underflows to exactly 0.0


class ArchitectureError(ValueError):
    """Op invoked on a model of the wrong architecture."""


@dataclass
class AttentionConfig:
    key_dim: int = 32
    ffn_hidden: int = 32
    look_ahead: int | None = 10  # None = infinite (whole utterance)

    def validate(self) -> None:
        if self.key_dim < 1 or self.ffn_hidden < 1:
            raise ValueError("attention dims must be >= 1")
        if self.look_ahead is not None and self.look_ahead < 0:
            raise ValueError("look_ahead must be >= 0 or None (infinite)")

    def to_dict(self) -> dict:
        return {"key_dim": self.key_dim, "ffn_hidden": self.ffn_hidden,
                "look_ahead": self.look_ahead}


@dataclass
class ModelConfig:
    architecture: str = "multisoftmax_attn"
    input_dim: int = 24
    encoder_layers: int = 2
    encoder_hidden: int = 64
    prediction_layers: int = 1
    prediction_hidden: int = 64
    embed_dim: int = 32
    joint_hidden: int = 64
    attention: AttentionConfig | None = field(default_factory=AttentionConfig)

    def __post_init__(self):
        if self.architecture != "multisoftmax_attn":
            # attention config present iff the architecture uses it
            self.attention = None
        elif self.attention is None:
            self.attention = AttentionConfig()

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        for name in ("input_dim", "encoder_layers", "encoder_hidden",
                     "prediction_layers", "prediction_hidden", "embed_dim",
                     "joint_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.attention is not None:
            self.attention.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attention"] = self.attention.to_dict() if self.attention else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(d)
        attn = kwargs.pop("attention", None)
        if attn is not None:
            extra = set(attn) - set(AttentionConfig.__dataclass_fields__)
            if extra:
                raise ValueError(f"unknown attention config keys: {sorted(extra)}")
            attn = AttentionConfig(**attn)
        cfg = cls(attention=attn, **kwargs)
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def parameter_manifest(config: ModelConfig, combined: CombinedTable) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every trainable tensor of the architecture."""
    config.validate()
    m: dict[str, tuple[int, ...]] = {}
    din = config.input_dim
    for i in range(config.encoder_layers):
        h = config.encoder_hidden
        m[f"encoder.{i}.wx"] = (din, 4 * h)
        m[f"encoder.{i}.wh"] = (h, 4 * h)
        m[f"encoder.{i}.b"] = (4 * h,)
        din = h
    # one shared label embedding over combined non-blank symbols; final row
    # is the start-of-sequence embedding
    m["embed"] = (combined.size, config.embed_dim)
    din = config.embed_dim
    for i in range(config.prediction_layers):
        h = config.prediction_hidden
        m[f"prediction.{i}.wx"] = (din, 4 * h)
        m[f"prediction.{i}.wh"] = (h, 4 * h)
        m[f"prediction.{i}.b"] = (4 * h,)
        din = h

    def joint(prefix: str, out_size: int) -> None:
        j = config.joint_hidden
        m[f"{prefix}.w_enc"] = (config.encoder_hidden, j)
        m[f"{prefix}.w_pred"] = (config.prediction_hidden, j)
        m[f"{prefix}.b"] = (j,)
        m[f"{prefix}.w_out"] = (j, out_size)
        m[f"{prefix}.b_out"] = (out_size,)

    if config.architecture == "vanilla":
        joint("joint", combined.size)
    else:
        joint("joint_A", combined.table_a.size)
        joint("joint_B", combined.table_b.size)
    if config.architecture == "multisoftmax_attn":
        dk = config.attention.key_dim
        f = config.attention.ffn_hidden
        m["attention.wq"] = (config.encoder_hidden, dk)
        m["attention.wk"] = (config.encoder_hidden, dk)
        m["attention.wv"] = (config.encoder_hidden, dk)
        m["attention.ffn_w1"] = (dk, f)
        m["attention.ffn_b1"] = (f,)
        m["attention.ffn_w2"] = (f, 2)
        m["attention.ffn_b2"] = (2,)
    return m


def init_parameters(config: ModelConfig, combined: CombinedTable, seed) -> dict[str, Tensor]:
    """uniform(-r, r), r = 1/sqrt(fan_in); one generator drives everything."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_manifest(config, combined).items():
        fan_in = shape[0] if len(shape) > 1 else shape[0]
        params[name] = ad.init_uniform(rng, shape, fan_in)
    return params


@dataclass
class Model:
    config: ModelConfig
    combined: CombinedTable
    params: dict[str, Tensor]

    @property
    def architecture(self) -> str:
        return self.config.architecture

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def init_model(config: ModelConfig, combined: CombinedTable, seed) -> Model:
    config.validate()
    return Model(config, combined, init_parameters(config, combined, seed))


# ---------------------------------------------------------------------------
# Trunk
# ---------------------------------------------------------------------------


def encode(model: Model, features) -> Tensor:
    """Features (T, input_dim) -> encoder latents (T, encoder_hidden).

    Causal: frame t depends only on input frames <= t, so truncating the
    input reproduces the prefix of the output exactly.
    """
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"features must be (T, d) with T >= 1, got {x.shape}")
    if x.shape[1] != model.config.input_dim:
        raise ShapeError(
            f"feature dim {x.shape[1]} != configured input_dim {model.config.input_dim}"
        )
    for i in range(model.config.encoder_layers):
        x = ad.lstm_layer(x, _layer_params(model, "encoder", i))
    return x


def predict(model: Model, labels) -> Tensor:
    """Blank-free combined labels (U,) -> prediction latents (U+1, hidden).

    Row 0 consumes the learned start-of-sequence embedding; row u depends
    only on labels < u.
    """
    labels = np.asarray(labels, dtype=np.int64)
    blank = model.combined.blank_index
    if labels.size and (labels == blank).any():
        raise ValueError("labels must not contain the blank index")
    if labels.size and ((labels < 0) | (labels >= model.combined.size)).any():
        raise ValueError("label index outside the combined table")
    # non-blank combined indices are dense 0..K-2; embedding row K-1 is the
    # start-of-sequence vector
    idx = np.concatenate([[model.combined.size - 1], labels])
    x = model.params["embed"][idx]
    for i in range(model.config.prediction_layers):
        x = ad.lstm_layer(x, _layer_params(model, "prediction", i))
    return x


def _layer_params(model: Model, prefix: str, i: int) -> dict[str, Tensor]:
    return {
        "wx": model.params[f"{prefix}.{i}.wx"],
        "wh": model.params[f"{prefix}.{i}.wh"],
        "b": model.params[f"{prefix}.{i}.b"],
    }


# ---------------------------------------------------------------------------
# Joint networks
# ---------------------------------------------------------------------------


def _joint_grid(h_enc: Tensor, h_pred: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """Full (T, U+1, out) grid of log-probs for one joint network."""
    T = h_enc.shape[0]
    U1 = h_pred.shape[0]
    pe = ad.add(ad.matmul(h_enc, params[f"{prefix}.w_enc"]), params[f"{prefix}.b"])
    pp = ad.matmul(h_pred, params[f"{prefix}.w_pred"])
    j = pe.shape[1]
    hidden = ad.tanh(ad.add(ad.reshape(pe, (T, 1, j)), ad.reshape(pp, (1, U1, j))))
    logits = ad.add(ad.matmul(hidden, params[f"{prefix}.w_out"]), params[f"{prefix}.b_out"])
    return ad.log_softmax(logits, axis=-1)


def joint_vanilla(model: Model, h_enc_t, h_pred_u) -> Tensor:
    """Log-probs over the combined symbol set for one (frame, position) pair."""
    if model.architecture != "vanilla":
        raise ArchitectureError(f"joint_vanilla on {model.architecture} model")
    grid = _joint_grid(_as_row(h_enc_t), _as_row(h_pred_u), model.params, "joint")
    return ad.reshape(grid, (model.combined.size,))


def joint_language(model: Model, h_enc_t, h_pred_u, lang: str) -> Tensor:
    """Log-probs over one language's own table (incl. its blank and noise)."""
    if model.architecture not in ("multisoftmax", "multisoftmax_attn"):
        raise ArchitectureError(f"joint_language on {model.architecture} model")
    if lang not in ("A", "B"):
        raise ValueError(f"lang must be 'A' or 'B', got {lang!r}")
    table = model.combined.table_a if lang == "A" else model.combined.table_b
    grid = _joint_grid(_as_row(h_enc_t), _as_row(h_pred_u), model.params, f"joint_{lang}")
    return ad.reshape(grid, (table.size,))


def _as_row(v) -> Tensor:
    t = v if isinstance(v, Tensor) else Tensor(v)
    return ad.reshape(t, (1, t.size)) if t.ndim == 1 else t


# ---------------------------------------------------------------------------
# Attention language weighting
# ---------------------------------------------------------------------------


def attention_logweight_grid(model: Model, h_enc: Tensor,
                             look_ahead: int | None = "config") -> Tensor:
    """Per-frame language log-weights (T, 2) from masked self-attention.

    Query is the current frame; keys/values are frames <= t+L (all frames
    when L is None). Masked scores use a -1e30 offset whose exp underflows
    to exactly zero, so frames beyond the window cannot perturb the result
    even at the bit level.
    """
    if model.architecture != "multisoftmax_attn":
        raise ArchitectureError(f"attention on {model.architecture} model")
    if look_ahead == "config":
        look_ahead = model.config.attention.look_ahead
    p = model.params
    T = h_enc.shape[0]
    dk = model.config.attention.key_dim
    q = ad.matmul(h_enc, p["attention.wq"])
    k = ad.matmul(h_enc, p["attention.wk"])
    v = ad.matmul(h_enc, p["attention.wv"])
    scores = ad.mul(ad.matmul(q, _transpose(k)), 1.0 / math.sqrt(dk))
    if look_ahead is not None:
        t_idx = np.arange(T)[:, None]
        mask = np.where(np.arange(T)[None, :] <= t_idx + look_ahead, 0.0, MASK_NEG)
        scores = ad.add(scores, Tensor(mask))
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(attn, v)
    hidden = ad.tanh(ad.add(ad.matmul(ctx, p["attention.ffn_w1"]), p["attention.ffn_b1"]))
    logits = ad.add(ad.matmul(hidden, p["attention.ffn_w2"]), p["attention.ffn_b2"])
    return ad.log_softmax(logits, axis=-1)


def _transpose(t: Tensor) -> Tensor:
    data = t.data.T

    def backward(g):
        ad._accumulate(t, g.T)

    return ad._make(data, (t,), backward)


def attention_weights(model: Model, h_enc: np.ndarray, t: int,
                      look_ahead: int | None, params_np: dict[str, np.ndarray] | None = None
                      ) -> tuple[float, float]:
    """(w_A, w_B) at frame t, computed on the window h_enc[: t+L+1] only.

    Inference-path twin of `attention_logweight_grid`; because it never
    reads past the window, it is what the streaming decoder evaluates as
    frames arrive.
    """
    T = h_enc.shape[0]
    if not 0 <= t < T:
        raise IndexError(f"frame {t} outside [0, {T})")
    if params_np is None:
        params_np = {name: p.data for name, p in model.params.items()}
    win = T if look_ahead is None else min(t + look_ahead + 1, T)
    dk = params_np["attention.wq"].shape[1]
    q = h_enc[t] @ params_np["attention.wq"]
    keys = h_enc[:win] @ params_np["attention.wk"]
    vals = h_enc[:win] @ params_np["attention.wv"]
    s = keys @ q / math.sqrt(dk)
    a = np.exp(s - s.max())
    a /= a.sum()
    ctx = a @ vals
    hidden = np.tanh(ctx @ params_np["attention.ffn_w1"] + params_np["attention.ffn_b1"])
    logits = hidden @ params_np["attention.ffn_w2"] + params_np["attention.ffn_b2"]
    e = np.exp(logits - logits.max())
    w = e / e.sum()
    return float(w[0]), float(w[1])


# ---------------------------------------------------------------------------
# Posterior combination
# ---------------------------------------------------------------------------


def combine_posteriors(logp_a: np.ndarray, logp_b: np.ndarray, w_a: float, w_b: float,
                       combined: CombinedTable) -> np.ndarray:
    """Weight-and-concatenate two per-language log-distributions (numpy).

    Non-blank mass of language X is scaled by w_X; the shared blank gets
    w_a*p_a(blank) + w_b*p_b(blank). With w_a + w_b = 1 the output is a
    distribution over the combined set.
    """
    if not (0.0 <= w_a <= 1.0 and 0.0 <= w_b <= 1.0):
        raise ValueError(f"weights outside [0, 1]: {w_a}, {w_b}")
    with np.errstate(divide="ignore"):
        lw_a = np.log(w_a) if w_a > 0 else -np.inf
        lw_b = np.log(w_b) if w_b > 0 else -np.inf
    out = np.empty(combined.size)
    a_idx = np.asarray(combined.a_nonblank)
    b_idx = np.asarray(combined.b_nonblank)
    out[list(combined.a_segment)] = logp_a[a_idx] + lw_a
    out[list(combined.b_segment)] = logp_b[b_idx] + lw_b
    out[combined.blank_index] = np.logaddexp(
        logp_a[combined.table_a.blank_index] + lw_a,
        logp_b[combined.table_b.blank_index] + lw_b,
    )
    return out


def _combine_grid(grid_a: Tensor, grid_b: Tensor, logw: Tensor | np.ndarray,
                  combined: CombinedTable) -> Tensor:
    """Tape version of combine_posteriors over full (T, U+1, .) grids.

    logw is (T, 2) log-weights broadcast over label positions.
    """
    logw = logw if isinstance(logw, Tensor) else Tensor(logw)
    T = grid_a.shape[0]
    lw_a = ad.reshape(logw[:, [0]], (T, 1, 1))
    lw_b = ad.reshape(logw[:, [1]], (T, 1, 1))
    a_idx = np.asarray(combined.a_nonblank)
    b_idx = np.asarray(combined.b_nonblank)
    a_nb = ad.add(grid_a[:, :, a_idx], lw_a)
    b_nb = ad.add(grid_b[:, :, b_idx], lw_b)
    bl_a = ad.add(grid_a[:, :, [combined.table_a.blank_index]], lw_a)
    bl_b = ad.add(grid_b[:, :, [combined.table_b.blank_index]], lw_b)
    blank = ad.logaddexp(bl_a, bl_b)
    return ad.concat([a_nb, b_nb, blank], axis=-1)


def posterior_grid(model: Model, features, labels,
                   forced_weights: tuple[float, float] | None = None,
                   look_ahead: int | None = "config"
                   ) -> tuple[Tensor, np.ndarray | None]:
    """Full (T, U+1, K) grid of combined log-probs (+ (T, 2) weights).

    The weight trajectory is returned for multisoftmax_attn models (or when
    weights are forced); vanilla/multisoftmax return None. Every (t, u)
    slice exp-sums to 1.
    """
    h_enc = encode(model, features)
    h_pred = predict(model, labels)
    T = h_enc.shape[0]
    if model.architecture == "vanilla":
        if forced_weights is not None:
            raise ArchitectureError("vanilla model has no language weights to force")
        return _joint_grid(h_enc, h_pred, model.params, "joint"), None

    grid_a = _joint_grid(h_enc, h_pred, model.params, "joint_A")
    grid_b = _joint_grid(h_enc, h_pred, model.params, "joint_B")
    if forced_weights is not None:
        w_a, w_b = forced_weights
        if not (0.0 <= w_a <= 1.0 and 0.0 <= w_b <= 1.0):
            raise ValueError(f"forced weights outside [0, 1]: {forced_weights}")
        with np.errstate(divide="ignore"):
            logw = np.full((T, 2), -np.inf)
            if w_a > 0:
                logw[:, 0] = np.log(w_a)
            if w_b > 0:
                logw[:, 1] = np.log(w_b)
        return _combine_grid(grid_a, grid_b, logw, model.combined), np.exp(logw)
    if model.architecture == "multisoftmax":
        logw = np.full((T, 2), math.log(0.5))
        return _combine_grid(grid_a, grid_b, logw, model.combined), None
    logw_t = attention_logweight_grid(model, h_enc, look_ahead)
    grid = _combine_grid(grid_a, grid_b, logw_t, model.combined)
    return grid, np.exp(logw_t.data)
