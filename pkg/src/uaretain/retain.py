"""RETAIN two-level attention network with deterministic or Gaussian attention.

All tape-level functions operate on a batch of records that share the same
number of timesteps: inputs are ``(B, T, F)``, timestep logits ``(B, T)``,
feature logits ``(B, T, r)``. Random draws (attention noise, output noise,
dropout masks) are supplied by the caller as a :class:`Draws` bundle and
enter the tape as constants.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .grad import Tape, Tensor

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
INIT_LOGVAR = -4.0

RNN_NAMES = ("rnn_alpha", "rnn_beta")
DROPOUT_KEYS = tuple(f"{rnn}.{w}" for rnn in RNN_NAMES for w in ("W", "U"))


class Variant(str, enum.Enum):
    DA = "DA"
    UA_INDEP = "UA_INDEP"
    UA = "UA"
    UA_PLUS = "UA_PLUS"

    @classmethod
    def parse(cls, text: str) -> "Variant":
        key = text.strip().upper().replace("-", "_").replace("+", "_PLUS")
        if key == "UA_INDEPENDENT":
            key = "UA_INDEP"
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown variant {text!r}") from None

    @property
    def cli_name(self) -> str:
        return self.value.lower().replace("_", "-")

    @property
    def stochastic_attention(self) -> bool:
        return self is not Variant.DA


@dataclass(frozen=True)
class Dims:
    n_features: int
    embed_dim: int
    hidden: int


def param_shapes(dims: Dims, variant: Variant) -> dict[str, tuple]:
    F, r, H = dims.n_features, dims.embed_dim, dims.hidden
    shapes = {"W_emb": (r, F)}
    for rnn in RNN_NAMES:
        shapes[f"{rnn}.W"] = (3 * H, r)
        shapes[f"{rnn}.U"] = (3 * H, H)
        shapes[f"{rnn}.b"] = (3 * H,)
    shapes.update(w_alpha=(H,), b_alpha=(), W_beta=(r, H), b_beta=(r,))
    if variant in (Variant.UA, Variant.UA_PLUS):
        shapes.update(w_alpha_var=(H,), b_alpha_var=(), W_beta_var=(r, H), b_beta_var=(r,))
    if variant is Variant.UA_INDEP:
        shapes.update(sigma_indep_e=(), sigma_indep_d=(r,))
    shapes.update(w_out=(r,), b_out=())
    if variant is Variant.UA_PLUS:
        shapes.update(w_outvar=(r,), b_outvar=())
    return shapes


# names that receive l2 decay: mean-path weights only
DECAYED = ("W_emb", "rnn_alpha.W", "rnn_alpha.U", "rnn_beta.W", "rnn_beta.U", "w_alpha", "W_beta", "w_out")
VARIANCE_HEADS = ("w_alpha_var", "b_alpha_var", "W_beta_var", "b_beta_var", "w_outvar", "b_outvar",
                  "sigma_indep_e", "sigma_indep_d")


@dataclass
class ModelParams:
    variant: Variant
    dims: Dims
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.dims, self.variant)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValueError(f"parameter set mismatch for {self.variant.value}: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            arr = np.asarray(self.tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.variant, self.dims, {k: v.copy() for k, v in self.tensors.items()})

    def weight_matrices(self) -> list[str]:
        return [name for name in DECAYED if name in self.tensors]


def init_params(dims: Dims, variant: Variant, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases, near-deterministic variance heads."""
    tensors = {}
    for name, shape in param_shapes(dims, variant).items():
        if name in VARIANCE_HEADS:
            if name.startswith(("b_", "sigma_")):
                tensors[name] = np.full(shape, INIT_LOGVAR)
            else:
                tensors[name] = np.zeros(shape)
        elif name.startswith("b") or name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            fan_out, fan_in = shape if len(shape) == 2 else (1, shape[0])
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(variant, dims, tensors)


@dataclass
class Draws:
    """Random inputs for one batched forward pass.

    ``masks`` maps RNN weight names (``rnn_alpha.W`` ...) to per-record
    inverted-dropout masks of shape ``(B, *weight.shape)``; an empty dict
    disables dropout.
    """

    eps_e: np.ndarray
    eps_d: np.ndarray
    eps_out: np.ndarray
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def batch(self) -> int:
        return self.eps_e.shape[0]

    @classmethod
    def zeros(cls, batch: int, T: int, dims: Dims) -> "Draws":
        return cls(np.zeros((batch, T)), np.zeros((batch, T, dims.embed_dim)), np.zeros(batch))

    @classmethod
    def concat(cls, parts: list["Draws"]) -> "Draws":
        keys = set(parts[0].masks)
        if any(set(p.masks) != keys for p in parts):
            raise ValueError("cannot concatenate draws with different dropout layouts")
        return cls(
            np.concatenate([p.eps_e for p in parts]),
            np.concatenate([p.eps_d for p in parts]),
            np.concatenate([p.eps_out for p in parts]),
            {k: np.concatenate([p.masks[k] for p in parts]) for k in sorted(keys)},
        )


def dropout_masks(shapes: dict[str, tuple], rate: float, rng: np.random.Generator, batch: int = 1) -> dict[str, np.ndarray]:
    """Inverted-dropout masks: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = 1.0 / (1.0 - rate)
    masks = {}
    for name, shape in shapes.items():
        if rate == 0.0:
            masks[name] = np.ones((batch, *shape))
        else:
            masks[name] = (rng.random((batch, *shape)) >= rate) * keep
    return masks


def sample_draws(rng: np.random.Generator, batch: int, T: int, params: ModelParams, dropout_rate: float) -> Draws:
    dims = params.dims
    eps_e = rng.standard_normal((batch, T))
    eps_d = rng.standard_normal((batch, T, dims.embed_dim))
    eps_out = rng.standard_normal(batch)
    masks = {}
    if dropout_rate > 0.0:
        masks = dropout_masks({k: params[k].shape for k in DROPOUT_KEYS}, dropout_rate, rng, batch)
    return Draws(eps_e, eps_d, eps_out, masks)


# ------------------------------------------------------------ tape functions

def embed(tape: Tape, x: Tensor, W_emb: Tensor) -> Tensor:
    """``v_j = W_emb @ x_j`` for every record and timestep."""
    return tape.matmul(x, tape.transpose(W_emb))


def rnn_forward(tape: Tape, v: Tensor, W: Tensor, U: Tensor, b: Tensor,
                mask_W: np.ndarray | None = None, mask_U: np.ndarray | None = None) -> Tensor:
    """GRU run over the reversed sequence; output re-indexed to forward time.

    Gates per step, with ``[z | r | n]`` row blocks in ``W``, ``U`` and ``b``:
    ``z = sig(Wz x + Uz h + bz)``, ``r = sig(Wr x + Ur h + br)``,
    ``n = tanh(Wn x + bn + r * (Un h))``, ``h' = (1 - z) * n + z * h``.
    """
    B, T, _ = v.shape
    H = U.shape[1]
    v_rev = tape.slice(v, (slice(None), slice(None, None, -1)))
    if mask_W is None:
        xw = tape.matmul(v_rev, tape.transpose(W))
    else:
        xw = tape.matvec(tape.mul(W, tape.constant(mask_W)), v_rev)
    xw = tape.add(xw, b)
    if mask_U is None:
        Ut = tape.transpose(U)
        project = lambda h: tape.matmul(h, Ut)  # noqa: E731
    else:
        Um = tape.mul(U, tape.constant(mask_U))
        project = lambda h: tape.matvec(Um, h)  # noqa: E731

    gates = [slice(0, H), slice(H, 2 * H), slice(2 * H, 3 * H)]
    h = tape.constant(np.zeros((B, H)))
    outs = []
    for t in range(T):
        xz, xr, xn = (tape.slice(xw, (slice(None), t, g)) for g in gates)
        hu = project(h)
        hz, hr, hn = (tape.slice(hu, (slice(None), g)) for g in gates)
        z = tape.sigmoid(tape.add(xz, hz))
        r = tape.sigmoid(tape.add(xr, hr))
        n = tape.tanh(tape.add(xn, tape.mul(r, hn)))
        h = tape.add(n, tape.mul(z, tape.sub(h, n)))
        outs.append(h)
    return tape.stack(outs[::-1], axis=1)


@dataclass
class AttentionParams:
    mu_e: Tensor
    logvar_e: Tensor | None
    mu_d: Tensor
    logvar_d: Tensor | None


def attention_params(tape: Tape, g: Tensor, h: Tensor, P: dict[str, Tensor], variant: Variant) -> AttentionParams:
    mu_e = tape.add(tape.sum(tape.mul(g, P["w_alpha"]), axis=-1), P["b_alpha"])
    mu_d = tape.add(tape.matmul(h, tape.transpose(P["W_beta"])), P["b_beta"])
    logvar_e = logvar_d = None
    if variant in (Variant.UA, Variant.UA_PLUS):
        raw_e = tape.add(tape.sum(tape.mul(g, P["w_alpha_var"]), axis=-1), P["b_alpha_var"])
        raw_d = tape.add(tape.matmul(h, tape.transpose(P["W_beta_var"])), P["b_beta_var"])
        logvar_e = tape.clip(raw_e, LOGVAR_MIN, LOGVAR_MAX)
        logvar_d = tape.clip(raw_d, LOGVAR_MIN, LOGVAR_MAX)
    elif variant is Variant.UA_INDEP:
        # shapes () and (r,): broadcast against the logits in sample_logits
        logvar_e = tape.clip(P["sigma_indep_e"], LOGVAR_MIN, LOGVAR_MAX)
        logvar_d = tape.clip(P["sigma_indep_d"], LOGVAR_MIN, LOGVAR_MAX)
    return AttentionParams(mu_e, logvar_e, mu_d, logvar_d)


def sample_logits(tape: Tape, mu: Tensor, logvar: Tensor | None, eps: np.ndarray) -> Tensor:
    """Reparameterized draw ``mu + exp(logvar / 2) * eps``; ``mu`` when deterministic."""
    if logvar is None:
        return mu
    sd = tape.exp(tape.scale(logvar, 0.5))
    return tape.add(mu, tape.mul(tape.constant(eps), sd))


def squash(tape: Tape, z_e: Tensor, z_d: Tensor) -> tuple[Tensor, Tensor]:
    return tape.softmax(z_e), tape.tanh(z_d)


def context_vector(tape: Tape, alpha: Tensor, beta: Tensor, v: Tensor) -> Tensor:
    weighted = tape.mul(tape.mul(beta, v), alpha, align="left")
    return tape.sum(weighted, axis=1)


def predict(tape: Tape, c: Tensor, P: dict[str, Tensor], variant: Variant,
            eps_out: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(p_hat, logit, base_logit)``; they differ only for UA_PLUS."""
    base = tape.add(tape.sum(tape.mul(c, P["w_out"]), axis=-1), P["b_out"])
    logit = base
    if variant is Variant.UA_PLUS:
        if eps_out is None:
            raise ValueError("UA_PLUS prediction needs an output noise draw")
        raw = tape.add(tape.sum(tape.mul(c, P["w_outvar"]), axis=-1), P["b_outvar"])
        sd = tape.exp(tape.scale(tape.clip(raw, LOGVAR_MIN, LOGVAR_MAX), 0.5))
        logit = tape.add(base, tape.mul(tape.constant(eps_out), sd))
    return tape.sigmoid(logit), logit, base


def contribution(alpha: np.ndarray, beta: np.ndarray, W_emb: np.ndarray, w_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Per-cell share of the logit: ``alpha_j * w_out . (beta_j * W_emb[:, k]) * x_jk``.

    Works on a single record (``alpha (T,)``) or a batch (``alpha (B, T)``).
    """
    coef = (beta * w_out) @ W_emb  # (..., T, F)
    return alpha[..., None] * coef * x


# ------------------------------------------------------------------ forward

@dataclass
class BatchForward:
    p_hat: Tensor
    logit: Tensor
    base_logit: Tensor
    v: Tensor
    att: AttentionParams
    alpha: Tensor
    beta: Tensor


def param_leaves(tape: Tape, params: ModelParams, trainable: bool = True) -> dict[str, Tensor]:
    make = tape.leaf if trainable else tape.constant
    return {name: make(arr, name=name) for name, arr in params.tensors.items()}


def forward_batch(tape: Tape, P: dict[str, Tensor], x: np.ndarray, draws: Draws, variant: Variant) -> BatchForward:
    xt = tape.constant(x)
    v = embed(tape, xt, P["W_emb"])
    hidden = {}
    for rnn in RNN_NAMES:
        hidden[rnn] = rnn_forward(
            tape, v, P[f"{rnn}.W"], P[f"{rnn}.U"], P[f"{rnn}.b"],
            draws.masks.get(f"{rnn}.W"), draws.masks.get(f"{rnn}.U"),
        )
    att = attention_params(tape, hidden["rnn_alpha"], hidden["rnn_beta"], P, variant)
    z_e = sample_logits(tape, att.mu_e, att.logvar_e, draws.eps_e)
    z_d = sample_logits(tape, att.mu_d, att.logvar_d, draws.eps_d)
    alpha, beta = squash(tape, z_e, z_d)
    c = context_vector(tape, alpha, beta, v)
    p_hat, logit, base = predict(tape, c, P, variant, draws.eps_out)
    return BatchForward(p_hat, logit, base, v, att, alpha, beta)


@dataclass
class AttentionReport:
    mu_e: np.ndarray
    sd_e: np.ndarray
    mu_d: np.ndarray
    sd_d: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    contribution: np.ndarray
    p_hat: float
    logit: float
    base_logit: float


def _sd(logvar: Tensor | None, shape: tuple) -> np.ndarray:
    if logvar is None:
        return np.zeros(shape)
    return np.broadcast_to(np.exp(0.5 * logvar.value), shape).copy()


def reports_from(out: BatchForward, params: ModelParams, x: np.ndarray) -> list[AttentionReport]:
    contrib = contribution(out.alpha.value, out.beta.value, params["W_emb"], params["w_out"], x)
    sd_e = _sd(out.att.logvar_e, out.att.mu_e.shape)
    sd_d = _sd(out.att.logvar_d, out.att.mu_d.shape)
    return [
        AttentionReport(
            mu_e=out.att.mu_e.value[b], sd_e=sd_e[b], mu_d=out.att.mu_d.value[b], sd_d=sd_d[b],
            alpha=out.alpha.value[b], beta=out.beta.value[b], contribution=contrib[b],
            p_hat=float(out.p_hat.value[b]), logit=float(out.logit.value[b]),
            base_logit=float(out.base_logit.value[b]),
        )
        for b in range(x.shape[0])
    ]


def forward(x: np.ndarray, params: ModelParams, draws: Draws | None = None,
            trainable: bool = False) -> tuple[float, AttentionReport, Tape]:
    """Single-record forward pass; ``x`` is ``(T, F)``. No draws means zero noise, no dropout."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.dims.n_features:
        raise ValueError(f"expected input of shape (T, {params.dims.n_features}), got {x.shape}")
    if draws is None:
        draws = Draws.zeros(1, x.shape[0], params.dims)
    tape = Tape()
    P = param_leaves(tape, params, trainable)
    out = forward_batch(tape, P, x[None], draws, params.variant)
    report = reports_from(out, params, x[None])[0]
    return report.p_hat, report, tape
