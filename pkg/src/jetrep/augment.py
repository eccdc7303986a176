"""Physics-preserving jet augmentations with post-augmentation sanitization.

The JetCLR pipeline uses exact kinematic symmetries (azimuthal rotation,
rapidity/azimuth translation) plus IRC-safe collinear splits and soft
additions; the SupCon pipelines use mild noise, smearing, particle
dropout and small translations. Every pipeline ends by sanitizing the
result against a reference jet that tracks each particle's origin, so
count-changing ops stay compatible with the revert-to-original rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .jetdata import (
    MAX_PARTICLES,
    Jet,
    _TYPE_MASSES,
    kinematics_arrays,
    jet_axis,
    sanitize,
    wrap_phi,
)

PIPELINE_MODES = ("jetclr", "supcon_train", "supcon_val", "identity")
_VAL_SAFE_OPS = {"noise", "smear"}


class AugmentError(Exception):
    pass


def _rebuild(pt, y, phi, mass, flags, label):
    """Particles from (pT, rapidity, phi, mass); mass is held exact."""
    mt = np.sqrt(pt * pt + mass * mass)
    momenta = np.column_stack([pt * np.cos(phi), pt * np.sin(phi),
                               mt * np.sinh(y), mt * np.cosh(y)])
    return Jet(momenta, flags, label)


def rotate(jet: Jet, angle: float) -> Jet:
    """Rotate all particles rigidly about the beam axis by `angle`.

    An exact detector symmetry: every pairwise feature, every particle pT
    and the jet pT are preserved to floating precision.
    """
    if angle == 0.0:
        return jet.copy()
    c, s = np.cos(angle), np.sin(angle)
    px, py = jet.momenta[:, 0], jet.momenta[:, 1]
    momenta = jet.momenta.copy()
    momenta[:, 0] = c * px - s * py
    momenta[:, 1] = s * px + c * py
    return Jet(momenta, jet.type_flags.copy(), jet.label)


def translate(jet: Jet, d_rapidity: float, d_phi: float) -> Jet:
    """Shift all particles rigidly in (rapidity, phi).

    A longitudinal boost plus a beam rotation; pairwise features are
    invariant. Shifts are capped at |dy| <= 1 and |dphi| <= pi.
    """
    if abs(d_rapidity) > 1.0 or abs(d_phi) > np.pi:
        raise AugmentError(
            f"translation ({d_rapidity}, {d_phi}) outside caps (1, pi)")
    if d_rapidity == 0.0 and d_phi == 0.0:
        return jet.copy()
    pt, y, phi, mass = kinematics_arrays(jet.momenta)
    return _rebuild(pt, y + d_rapidity, wrap_phi(phi + d_phi), mass,
                    jet.type_flags.copy(), jet.label)


def collinear_split(jet: Jet, index=None, fraction=None, rng=None,
                    nmax=MAX_PARTICLES, min_pt=1.0) -> Jet:
    """Replace one particle by two collinear fragments f*p and (1-f)*p.

    Jet 4-momentum is conserved exactly (the second fragment is computed
    as p - f*p). Jets already at `nmax` are returned unchanged. When
    `index`/`fraction` are omitted they are drawn with `rng` from the
    particles above the `min_pt` threshold.
    """
    if jet.n_particles >= nmax:
        return jet
    pt = np.hypot(jet.momenta[:, 0], jet.momenta[:, 1])
    if index is None:
        eligible = np.flatnonzero(pt > min_pt)
        if eligible.size == 0:
            return jet
        index = int(eligible[rng.integers(0, eligible.size)])
    elif pt[index] <= min_pt:
        raise AugmentError(f"split target {index} below pT threshold {min_pt}")
    if fraction is None:
        fraction = rng.uniform(0.1, 0.9)
    if not 0.0 < fraction < 1.0:
        raise AugmentError(f"split fraction must be in (0, 1), got {fraction}")
    p = jet.momenta[index]
    first = fraction * p
    second = p - first
    momenta = np.vstack([jet.momenta[:index], first[None, :],
                         jet.momenta[index + 1:], second[None, :]])
    flags = np.concatenate([jet.type_flags[:index], jet.type_flags[index:index + 1],
                            jet.type_flags[index + 1:], jet.type_flags[index:index + 1]])
    return Jet(momenta, flags, jet.label)


_SOFT_TYPE_PROBS = np.array([0.6, 0.25, 0.15, 0.0, 0.0])


def soft_add(jet: Jet, n_soft: int, pt_scale: float, rng,
             nmax=MAX_PARTICLES, max_dr=0.8) -> Jet:
    """Add up to `n_soft` soft particles within dR < `max_dr` of the axis.

    pT is drawn uniformly from (0, pt_scale]; the softness bound
    pt_scale <= 1e-3 * jet pT is enforced so leading observables barely
    move.
    """
    if n_soft == 0:
        return jet.copy()
    jpt = jet.pt()
    if pt_scale > 1e-3 * jpt:
        raise AugmentError(
            f"pt_scale {pt_scale} violates softness bound {1e-3 * jpt:.3g}")
    n_soft = min(int(n_soft), nmax - jet.n_particles)
    if n_soft <= 0:
        return jet.copy()
    ax_y, ax_phi = jet_axis(jet)
    pts = (1.0 - rng.random(n_soft)) * pt_scale
    radius = max_dr * np.sqrt(rng.random(n_soft))
    theta = rng.uniform(0.0, 2.0 * np.pi, n_soft)
    y = ax_y + radius * np.cos(theta)
    phi = wrap_phi(ax_phi + radius * np.sin(theta))
    flags = rng.choice(5, size=n_soft, p=_SOFT_TYPE_PROBS).astype(np.uint8)
    soft = _rebuild(pts, y, phi, _TYPE_MASSES[flags], flags, jet.label)
    return Jet(np.vstack([jet.momenta, soft.momenta]),
               np.concatenate([jet.type_flags, soft.type_flags]), jet.label)


def smear(jet: Jet, sigma_pt_rel: float, sigma_angle: float, rng) -> Jet:
    """Multiply each particle pT by (1 + eps) and jitter its angles."""
    if sigma_pt_rel == 0.0 and sigma_angle == 0.0:
        return jet.copy()
    n = jet.n_particles
    pt, y, phi, mass = kinematics_arrays(jet.momenta)
    pt = pt * (1.0 + rng.normal(0.0, sigma_pt_rel, n))
    y = y + rng.normal(0.0, sigma_angle, n)
    phi = wrap_phi(phi + rng.normal(0.0, sigma_angle, n))
    out = _rebuild(np.abs(pt), y, phi, mass, jet.type_flags.copy(), jet.label)
    return sanitize(out, jet)


def noise(jet: Jet, sigma_rel: float, rng) -> Jet:
    """Gaussian perturbation of 3-momenta, scaled per particle by |p|.

    Energy is recomputed to keep each particle's mass, so the output is
    physical by construction.
    """
    if sigma_rel == 0.0:
        return jet.copy()
    p3 = jet.momenta[:, :3]
    _, _, _, mass = kinematics_arrays(jet.momenta)
    scale = sigma_rel * np.maximum(np.linalg.norm(p3, axis=1, keepdims=True), 1e-12)
    p3 = p3 + rng.normal(0.0, 1.0, p3.shape) * scale
    e = np.sqrt(np.einsum("ij,ij->i", p3, p3) + mass * mass)
    out = Jet(np.column_stack([p3, e]), jet.type_flags.copy(), jet.label)
    return sanitize(out, jet)


def _dropout_keep(n, rate, rng):
    keep = rng.random(n) >= rate
    if not np.any(keep):
        keep[0] = True  # dropout always keeps at least one particle
    return keep


def particle_dropout(jet: Jet, rate: float, rng) -> Jet:
    """Remove each particle independently with probability `rate`."""
    if rate == 0.0:
        return jet.copy()
    keep = _dropout_keep(jet.n_particles, rate, rng)
    return Jet(jet.momenta[keep], jet.type_flags[keep], jet.label)


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentOp:
    name: str
    prob: float = 1.0
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AugmentationPipeline:
    """Ordered augmentation specs; apply() ends with sanitize-against-original."""

    mode: str
    ops: tuple
    nmax: int = MAX_PARTICLES

    def __post_init__(self):
        if self.mode not in PIPELINE_MODES:
            raise AugmentError(f"unknown pipeline mode {self.mode!r}")
        if self.mode == "supcon_val":
            bad = [op.name for op in self.ops if op.name not in _VAL_SAFE_OPS]
            if bad:
                raise AugmentError(
                    f"supcon_val pipelines allow only noise/smear, got {bad}")

    def apply(self, jet: Jet, rng) -> Jet:
        cur = jet
        ref = jet  # tracks per-particle origins through structural ops
        for op in self.ops:
            if op.prob < 1.0 and rng.random() >= op.prob:
                continue
            cur, ref = self._apply_op(op, cur, ref, rng)
        return sanitize(cur, ref)

    def _apply_op(self, op, cur, ref, rng):
        p = op.params
        if op.name == "rotate":
            return rotate(cur, rng.uniform(0.0, 2.0 * np.pi)), ref
        if op.name == "translate":
            m = p.get("max_shift", 0.1)
            return translate(cur, rng.uniform(-m, m), rng.uniform(-m, m)), ref
        if op.name == "collinear_split":
            pt = np.hypot(cur.momenta[:, 0], cur.momenta[:, 1])
            eligible = np.flatnonzero(pt > p.get("min_pt", 1.0))
            if eligible.size == 0 or cur.n_particles >= self.nmax:
                return cur, ref
            index = int(eligible[rng.integers(0, eligible.size)])
            fraction = rng.uniform(0.1, 0.9)
            cur = collinear_split(cur, index, fraction, nmax=self.nmax)
            ref = collinear_split(ref, index, fraction, nmax=self.nmax)
            return cur, ref
        if op.name == "soft_add":
            n = int(rng.integers(1, p.get("n_max", 5) + 1))
            before = cur.n_particles
            cur = soft_add(cur, n, p.get("pt_scale", 0.1), rng, nmax=self.nmax)
            added = cur.momenta[before:]
            if added.shape[0]:
                ref = Jet(np.vstack([ref.momenta, added]),
                          np.concatenate([ref.type_flags, cur.type_flags[before:]]),
                          ref.label)
            return cur, ref
        if op.name == "smear":
            return smear(cur, p.get("sigma_pt_rel", 0.05),
                         p.get("sigma_angle", 0.01), rng), ref
        if op.name == "noise":
            return noise(cur, p.get("sigma_rel", 0.02), rng), ref
        if op.name == "particle_dropout":
            keep = _dropout_keep(cur.n_particles, p.get("rate", 0.05), rng)
            cur = Jet(cur.momenta[keep], cur.type_flags[keep], cur.label)
            ref = Jet(ref.momenta[keep], ref.type_flags[keep], ref.label)
            return cur, ref
        raise AugmentError(f"unknown augmentation op {op.name!r}")


def jetclr_pipeline(nmax=MAX_PARTICLES, translate_shift=0.1, split_prob=0.3,
                    n_splits=3, soft_prob=0.3, soft_n=5, soft_pt_scale=0.05):
    ops = [AugmentOp("rotate"), AugmentOp("translate", params={"max_shift": translate_shift})]
    ops += [AugmentOp("collinear_split", prob=split_prob) for _ in range(n_splits)]
    ops.append(AugmentOp("soft_add", prob=soft_prob,
                         params={"n_max": soft_n, "pt_scale": soft_pt_scale}))
    return AugmentationPipeline("jetclr", tuple(ops), nmax=nmax)


def supcon_train_pipeline(nmax=MAX_PARTICLES, sigma_rel=0.02, sigma_pt_rel=0.05,
                          sigma_angle=0.01, dropout_rate=0.05, translate_shift=0.05):
    ops = (
        AugmentOp("noise", params={"sigma_rel": sigma_rel}),
        AugmentOp("smear", params={"sigma_pt_rel": sigma_pt_rel,
                                   "sigma_angle": sigma_angle}),
        AugmentOp("particle_dropout", params={"rate": dropout_rate}),
        AugmentOp("translate", params={"max_shift": translate_shift}),
    )
    return AugmentationPipeline("supcon_train", ops, nmax=nmax)


def supcon_val_pipeline(nmax=MAX_PARTICLES, sigma_rel=0.02, sigma_pt_rel=0.05,
                        sigma_angle=0.01):
    ops = (
        AugmentOp("noise", params={"sigma_rel": sigma_rel}),
        AugmentOp("smear", params={"sigma_pt_rel": sigma_pt_rel,
                                   "sigma_angle": sigma_angle}),
    )
    return AugmentationPipeline("supcon_val", ops, nmax=nmax)


def identity_pipeline(nmax=MAX_PARTICLES):
    return AugmentationPipeline("identity", (), nmax=nmax)


def pipeline_by_name(name, nmax=MAX_PARTICLES, **overrides):
    factories = {
        "jetclr": jetclr_pipeline,
        "supcon_train": supcon_train_pipeline,
        "supcon_val": supcon_val_pipeline,
        "identity": identity_pipeline,
    }
    if name not in factories:
        raise AugmentError(f"unknown pipeline {name!r}")
    return factories[name](nmax=nmax, **overrides)


def two_views(jet: Jet, pipeline: AugmentationPipeline, rng):
    """Two independently augmented, sanitized views sharing the jet's label."""
    r1, r2 = rng.spawn(2)
    return pipeline.apply(jet, r1), pipeline.apply(jet, r2)
