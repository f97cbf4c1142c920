"""Second-order training scheme and the Adam baseline.

The second-order optimizer preconditions gradients with a block-diagonal
curvature model. Each weight matrix is one Kronecker block: an input
second-moment factor A estimated from batch activations, a pre-activation
factor G estimated from single-path pseudo-gradients, eigenbases of both,
and a dense matrix D of second moments re-estimated directly in that
eigenbasis. The pseudo-gradient is the backward pass of <s, u> where s
is drawn with covariance equal to the action-space curvature of the
pathwise surrogate loss, so the parameter-space covariance of the
pseudo-gradient is exactly the generalized Gauss-Newton matrix the
scheme approximates.

Damping shrinks each block's eigen-spectrum linearly toward its own mean
scale (trace preserving) instead of adding a shared ridge. Step sizes
come from a decaying trust region on the preconditioned-gradient inner
product. RMSNorm gains are not matrices; they fall back to the same
scheme with an identity eigenbasis, which reduces to a damped diagonal
method.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import contracts as ct
from . import diffcore as dc
from . import policy as pol


class OptimError(RuntimeError):
    """Numerical failure inside an optimizer update."""


# ---------------------------------------------------------------------------
# configs


@dataclass
class KfacConfig:
    n_cov: int = 5            # batch activation-factor update cadence
    n_evd: int = 25           # eigenbasis recomputation cadence
    beta_factor: float = 0.95     # EMA for A and G
    beta_scale: float = 0.95      # EMA for D
    beta_momentum: float = 0.92
    shrinkage: float = 5e-4
    tr_init: float = 1e-3
    tr_decay: float = 0.997
    eta_max: float = 0.5
    identity_basis: bool = False  # ablation: freeze Q = I, diagonal method

    def __post_init__(self):
        # zero is the degenerate always-replace EMA, useful in tests
        for name in ("beta_factor", "beta_scale", "beta_momentum"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if not 0.0 < self.tr_decay <= 1.0:
            raise ValueError("tr_decay must lie in (0, 1]")
        if not 0.0 < self.shrinkage < 1.0:
            raise ValueError("shrinkage must lie in (0, 1)")


@dataclass
class AdamConfig:
    lr_peak: float = 3e-3
    warmup_iters: int = 100       # linear ramp over roughly one epoch
    lr_decay: float = 0.9985      # per-step exponential decay after warmup
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0


# ---------------------------------------------------------------------------
# curvature state


@dataclass
class LayerCurvature:
    """State of one Kronecker block for a weight of shape (n_out, n_in + 1)."""

    a_cov: np.ndarray     # (n_in + 1, n_in + 1)
    g_cov: np.ndarray     # (n_out, n_out)
    q_a: np.ndarray       # eigenvectors of a_cov
    q_g: np.ndarray       # eigenvectors of g_cov
    scale: np.ndarray     # D: (n_out, n_in + 1) second moments in the eigenbasis
    momentum: np.ndarray  # (n_out, n_in + 1)

    @classmethod
    def fresh(cls, n_out: int, n_in_aug: int) -> "LayerCurvature":
        return cls(
            a_cov=np.zeros((n_in_aug, n_in_aug)),
            g_cov=np.zeros((n_out, n_out)),
            q_a=np.eye(n_in_aug),
            q_g=np.eye(n_out),
            scale=np.zeros((n_out, n_in_aug)),
            momentum=np.zeros((n_out, n_in_aug)),
        )


@dataclass
class DiagCurvature:
    """Diagonal-fallback state for non-matrix parameters (RMSNorm gains)."""

    scale: np.ndarray
    momentum: np.ndarray

    @classmethod
    def fresh(cls, shape) -> "DiagCurvature":
        return cls(scale=np.zeros(shape), momentum=np.zeros(shape))


def _sym_eigh_with_sign(m: np.ndarray) -> np.ndarray:
    """Eigenvectors of a symmetric matrix with a deterministic sign:
    the largest-magnitude component of each column is made positive."""
    n = m.shape[0]
    jitter = 1e-12 * np.trace(m) / n
    try:
        _, vecs = np.linalg.eigh(m + jitter * np.eye(n))
    except np.linalg.LinAlgError as exc:
        raise OptimError(f"eigendecomposition failed: {exc}") from exc
    lead = np.abs(vecs).argmax(axis=0)
    signs = np.sign(vecs[lead, np.arange(vecs.shape[1])])
    signs[signs == 0.0] = 1.0
    return vecs * signs


def damped_scale(scale: np.ndarray, shrinkage: float) -> np.ndarray:
    """Shrink toward the block's mean scale; preserves the trace exactly."""
    m = scale.mean()
    return (1.0 - shrinkage) * scale + shrinkage * m


@dataclass
class PseudoGradient:
    """Output of one pseudo-backward pass on a single path."""

    grads: dict[str, np.ndarray]               # parameter pseudo-gradients
    step_grads: dict[str, list[np.ndarray]]    # per-step pre-activation grads


def pseudo_backward(params: pol.PolicyParams, rollout_fn, hessian: ct.InnerHessian,
                    rng: np.random.Generator) -> PseudoGradient:
    """Backpropagate <s, u> for one sampled path.

    ``rollout_fn(params)`` must unroll the policy (or any toy model) on
    that path with capture enabled and return a RolloutResult whose
    action nodes form the vector u. The target s is drawn so that its
    covariance equals the action-space curvature, making the covariance
    of the returned parameter gradients the Gauss-Newton matrix.
    """
    result = rollout_fn(params)
    n_steps = len(result.action_nodes)
    d = result.action_nodes[0].value.shape[1]
    if hessian.r_vec.size != n_steps * d:
        raise ValueError("inner Hessian size does not match the unrolled actions")
    s = ct.sample_pseudo_target(hessian, rng).reshape(n_steps, d)
    tape = result.tape
    loss = None
    for t, u_t in enumerate(result.action_nodes):
        term = dc.total(dc.multiply(u_t, tape.constant(s[t:t + 1])))
        loss = term if loss is None else dc.add(loss, term)
    grads = dc.backward(loss, hooks=result.channels.values())
    step_grads = {name: chan.grads for name, chan in result.channels.items()}
    return PseudoGradient(grads=grads, step_grads=step_grads)


class KfacOptimizer:
    """Curvature-preconditioned trust-region updates for a hedging policy."""

    def __init__(self, params: pol.PolicyParams, config: KfacConfig):
        self.config = config
        self.step_count = 0
        self.rho_tr = config.tr_init
        self.blocks: dict[str, LayerCurvature] = {}
        self.diags: dict[str, DiagCurvature] = {}
        for name in params.kronecker_names:
            n_out, n_in_aug = params.values[name].shape
            self.blocks[name] = LayerCurvature.fresh(n_out, n_in_aug)
        for name in params.diagonal_names:
            self.diags[name] = DiagCurvature.fresh(params.values[name].shape)

    # -- cadence ------------------------------------------------------------

    @property
    def wants_input_stats(self) -> bool:
        return self.step_count % self.config.n_cov == 0

    @property
    def wants_eigenbasis(self) -> bool:
        return (not self.config.identity_basis
                and self.step_count % self.config.n_evd == 0)

    # -- statistics updates ---------------------------------------------------

    def update_input_stats(self, channels: dict[str, dc.HookChannel], batch_size: int) -> None:
        """EMA of the activation second moment, scaled by sqrt(T) overall."""
        beta = self.config.beta_factor
        for name, curve in self.blocks.items():
            chan = channels[name]
            stacked = np.concatenate(chan.activations, axis=0)
            n_steps = chan.n_firings
            contrib = stacked.T @ stacked / (batch_size * np.sqrt(n_steps))
            curve.a_cov *= beta
            curve.a_cov += (1.0 - beta) * contrib

    def update_output_stats(self, pseudo: PseudoGradient) -> None:
        """EMA of pre-activation pseudo-gradient moments and of the
        eigenbasis second moments (elementwise square after rotation)."""
        beta_f = self.config.beta_factor
        beta_d = self.config.beta_scale
        for name, curve in self.blocks.items():
            gs = pseudo.step_grads[name]
            stacked = np.concatenate(gs, axis=0)
            n_steps = len(gs)
            contrib = stacked.T @ stacked / np.sqrt(n_steps)
            curve.g_cov *= beta_f
            curve.g_cov += (1.0 - beta_f) * contrib
            rotated = curve.q_g.T @ pseudo.grads[name] @ curve.q_a
            curve.scale *= beta_d
            curve.scale += (1.0 - beta_d) * rotated ** 2
        for name, diag in self.diags.items():
            diag.scale *= beta_d
            diag.scale += (1.0 - beta_d) * pseudo.grads[name] ** 2

    def update_eigenbasis(self) -> None:
        for curve in self.blocks.values():
            curve.q_a = _sym_eigh_with_sign(curve.a_cov)
            curve.q_g = _sym_eigh_with_sign(curve.g_cov)

    # -- preconditioning and the step ----------------------------------------

    def precondition(self, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Rotate into the eigenbasis, divide by the damped scales, rotate
        back; diagonal-fallback parameters divide elementwise."""
        rho = self.config.shrinkage
        out: dict[str, np.ndarray] = {}
        for name, curve in self.blocks.items():
            if curve.scale.mean() <= 0.0:
                raise OptimError(f"dead curvature block '{name}': mean scale is zero")
            rotated = curve.q_g.T @ grads[name] @ curve.q_a
            rotated /= damped_scale(curve.scale, rho)
            out[name] = curve.q_g @ rotated @ curve.q_a.T
        for name, diag in self.diags.items():
            if diag.scale.mean() <= 0.0:
                raise OptimError(f"dead curvature block '{name}': mean scale is zero")
            out[name] = grads[name] / damped_scale(diag.scale, rho)
        return out

    def apply_step(self, params: pol.PolicyParams, preconditioned: dict[str, np.ndarray],
                   grads: dict[str, np.ndarray]) -> float:
        """Trust-region step size, momentum, parameter update; returns eta."""
        inner = 0.0
        for name in grads:
            inner += float((preconditioned[name] * grads[name]).sum())
        if inner < -1e-12:
            raise OptimError(f"non-positive curvature inner product {inner:.3e}")
        with np.errstate(divide="ignore"):
            eta = min(float(np.sqrt(self.rho_tr / inner)) if inner > 0 else np.inf,
                      self.config.eta_max)
        self.rho_tr *= self.config.tr_decay
        beta = self.config.beta_momentum
        for name, curve in self.blocks.items():
            curve.momentum *= beta
            curve.momentum += preconditioned[name]
            params.values[name] -= eta * curve.momentum
        for name, diag in self.diags.items():
            diag.momentum *= beta
            diag.momentum += preconditioned[name]
            params.values[name] -= eta * diag.momentum
        self.step_count += 1
        return eta

    def max_damped_scale(self) -> float:
        """Largest damped eigen-scale across blocks (preconditioner extreme)."""
        rho = self.config.shrinkage
        tops = [damped_scale(c.scale, rho).max() for c in self.blocks.values()]
        tops += [damped_scale(d.scale, rho).max() for d in self.diags.values()]
        return float(max(tops))

    # -- serialization ---------------------------------------------------------

    STATE_VERSION = 1

    def state_records(self) -> dict[str, np.ndarray]:
        out = {"opt/rho_tr": np.array([[self.rho_tr]]),
               "opt/step": np.array([[float(self.step_count)]])}
        for name, c in self.blocks.items():
            out[f"opt/{name}/a_cov"] = c.a_cov
            out[f"opt/{name}/g_cov"] = c.g_cov
            out[f"opt/{name}/q_a"] = c.q_a
            out[f"opt/{name}/q_g"] = c.q_g
            out[f"opt/{name}/scale"] = c.scale
            out[f"opt/{name}/momentum"] = c.momentum
        for name, d in self.diags.items():
            out[f"opt/{name}/scale"] = d.scale
            out[f"opt/{name}/momentum"] = d.momentum
        return out

    def load_state_records(self, records: dict[str, np.ndarray]) -> None:
        self.rho_tr = float(records["opt/rho_tr"][0, 0])
        self.step_count = int(records["opt/step"][0, 0])
        for name, c in self.blocks.items():
            c.a_cov = records[f"opt/{name}/a_cov"]
            c.g_cov = records[f"opt/{name}/g_cov"]
            c.q_a = records[f"opt/{name}/q_a"]
            c.q_g = records[f"opt/{name}/q_g"]
            c.scale = records[f"opt/{name}/scale"]
            c.momentum = records[f"opt/{name}/momentum"]
        for name, d in self.diags.items():
            d.scale = records[f"opt/{name}/scale"]
            d.momentum = records[f"opt/{name}/momentum"]


class AdamOptimizer:
    """Adam with a global gradient-norm clip and warmup/decay schedule."""

    def __init__(self, params: pol.PolicyParams, config: AdamConfig):
        self.config = config
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.values.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.values.items()}

    def learning_rate(self) -> float:
        c = self.config
        if self.step_count < c.warmup_iters:
            return c.lr_peak * (self.step_count + 1) / c.warmup_iters
        return c.lr_peak * c.lr_decay ** (self.step_count - c.warmup_iters + 1)

    def apply_step(self, params: pol.PolicyParams, grads: dict[str, np.ndarray]) -> float:
        c = self.config
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > c.clip_norm:
            grads = {k: g * (c.clip_norm / norm) for k, g in grads.items()}
        lr = self.learning_rate()
        self.step_count += 1
        t = self.step_count
        corr1 = 1.0 - c.beta1 ** t
        corr2 = 1.0 - c.beta2 ** t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            step = (m / corr1) / (np.sqrt(v / corr2) + c.eps)
            params.values[name] -= lr * step
        return lr

    STATE_VERSION = 1

    def state_records(self) -> dict[str, np.ndarray]:
        out = {"opt/step": np.array([[float(self.step_count)]])}
        for name in self.m:
            out[f"opt/{name}/m"] = self.m[name]
            out[f"opt/{name}/v"] = self.v[name]
        return out

    def load_state_records(self, records: dict[str, np.ndarray]) -> None:
        self.step_count = int(records["opt/step"][0, 0])
        for name in self.m:
            self.m[name] = records[f"opt/{name}/m"]
            self.v[name] = records[f"opt/{name}/v"]
