"""AdamW and Muon optimizers, gradient clipping, checkpoint selection."""

from __future__ import annotations

import numpy as np

# Convergent quintic polar iteration: f(s) = (15 s - 10 s^3 + 3 s^5) / 8 drives
# singular values monotonically to 1, so five steps orthogonalize
# well-conditioned matrices to ~1e-6. The reference tuple trades convergence
# for slope at 0 and leaves singular values oscillating in ~[0.7, 1.2].
NS_COEFFS_CONVERGENT = (1.875, -1.25, 0.375)
NS_COEFFS_REFERENCE = (3.4445, -4.7750, 2.0315)


class OptimError(Exception):
    pass


def newton_schulz5(matrix, steps=5, coeffs=NS_COEFFS_CONVERGENT):
    """Approximately orthogonalize a matrix by a quintic Newton-Schulz loop.

    The input is normalized by its Frobenius norm (an upper bound on the
    spectral norm), transposed when tall so the Gram matrix stays small,
    and iterated X <- aX + (bA + cA^2)X with A = XX^T.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2:
        raise OptimError(f"newton_schulz5 requires a 2-D matrix, got shape {x.shape}")
    a, b, c = coeffs
    transposed = x.shape[0] > x.shape[1]
    if transposed:
        x = x.T
    x = x / (np.linalg.norm(x) + 1e-7)
    for _ in range(steps):
        gram = x @ x.T
        x = a * x + (b * gram + c * (gram @ gram)) @ x
    return x.T if transposed else x


def orthogonality_error(x):
    """||XX^T - I||_F normalized by sqrt(#entries of the Gram matrix)."""
    x = np.asarray(x)
    n = min(x.shape)
    g = x @ x.T if x.shape[0] <= x.shape[1] else x.T @ x
    return float(np.linalg.norm(g - np.eye(n)) / n)


def clip_gradients(params, max_norm=1.0):
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the applied scale (1.0 when no clipping was needed).
    """
    total = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for g in grads:
        g *= scale
    return scale


class AdamW:
    """Adam with decoupled weight decay applied before the moment update."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.values) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in self.params.items()}

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                p.values -= self.lr * self.weight_decay * p.values
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self, prefix="opt."):
        out = {f"{prefix}step": np.array([float(self.step_count)])}
        for name in self.params:
            out[f"{prefix}m.{name}"] = self.m[name]
            out[f"{prefix}v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays, prefix="opt."):
        self.step_count = int(arrays[f"{prefix}step"][0])
        for name in self.params:
            self.m[name] = arrays[f"{prefix}m.{name}"].copy()
            self.v[name] = arrays[f"{prefix}v.{name}"].copy()


class Muon:
    """Orthogonalized momentum for 2-D weights, AdamW fallback elsewhere.

    The update for a matrix of shape (m, n) is
    lr * sqrt(max(m, n)) * newton_schulz5(momentum buffer), which gives
    roughly unit-RMS parameter updates.
    """

    def __init__(self, params, lr=0.02, momentum=0.95, ns_steps=5,
                 fallback_lr=1e-4, fallback_weight_decay=0.01,
                 muon_filter=None):
        params = dict(params)
        if muon_filter is None:
            muon_filter = lambda name, node: node.ndim == 2
        self.matrix_params = {k: p for k, p in params.items() if muon_filter(k, p)}
        for name, p in self.matrix_params.items():
            if p.ndim != 2:
                raise OptimError(
                    f"parameter {name!r} with shape {p.shape} routed to the "
                    "Muon path; only 2-D matrices are allowed")
        self.lr = lr
        self.momentum = momentum
        self.ns_steps = ns_steps
        self.buffers = {k: np.zeros_like(p.values) for k, p in self.matrix_params.items()}
        other = {k: p for k, p in params.items() if k not in self.matrix_params}
        self.fallback = AdamW(other, lr=fallback_lr,
                              weight_decay=fallback_weight_decay)
        self.step_count = 0

    def step(self):
        self.step_count += 1
        for name, p in self.matrix_params.items():
            g = p.grad
            if g is None:
                continue
            buf = self.buffers[name]
            buf *= self.momentum
            buf += g
            direction = newton_schulz5(buf, steps=self.ns_steps)
            p.values -= self.lr * np.sqrt(max(p.shape)) * direction
        self.fallback.step()

    def state_arrays(self, prefix="opt."):
        out = {f"{prefix}muon_step": np.array([float(self.step_count)])}
        for name in self.matrix_params:
            out[f"{prefix}buf.{name}"] = self.buffers[name]
        out.update(self.fallback.state_arrays(prefix=f"{prefix}fb."))
        return out

    def load_state_arrays(self, arrays, prefix="opt."):
        self.step_count = int(arrays[f"{prefix}muon_step"][0])
        for name in self.matrix_params:
            self.buffers[name] = arrays[f"{prefix}buf.{name}"].copy()
        self.fallback.load_state_arrays(arrays, prefix=f"{prefix}fb.")


def select_checkpoint(history, phase):
    """Pick the checkpoint id per the phase's selection rule.

    Pretraining selects the lowest validation loss; fine-tuning and
    supervised runs select the highest macro ROC-AUC. Ties go to the
    earliest epoch. `history` is a sequence of mappings with keys
    'checkpoint', 'val_loss' and (for finetune/supervised) 'macro_auc'.
    """
    if not history:
        raise OptimError("cannot select a checkpoint from an empty history")
    if phase == "pretrain":
        best = min(history, key=lambda r: r["val_loss"])
    elif phase in ("finetune", "supervised"):
        best = max(history, key=lambda r: r["macro_auc"])
    else:
        raise OptimError(f"unknown selection phase {phase!r}")
    return best["checkpoint"]
