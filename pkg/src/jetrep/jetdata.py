"""Jet/particle data model, physics preprocessing and file I/O.

Jets are variable-length particle clouds: per-particle (px, py, pz, E) in
GeV plus a small categorical type flag, and a 7-way class label. This
module owns the kinematic helpers, the per-jet pT normalization, the
post-augmentation sanitizer, the pairwise interaction features feeding
the encoder's attention bias, batch assembly, a class-separable toy jet
generator, and the on-disk jet formats.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

log = logging.getLogger(__name__)

# particle type flags
CHARGED_HADRON, NEUTRAL_HADRON, PHOTON, ELECTRON, MUON = range(5)
N_TYPES = 5

N_FEATURES = 10  # (dy, dphi, ln pT, ln E, dR) to jet axis + 5-way type one-hot
N_INTERACTION_FEATURES = 4  # ln dR, ln kT, ln z, ln m^2

LOG_FLOOR = 1e-8
LOG_FLOOR_SENTINEL = float(np.log(LOG_FLOOR))

JET_PT_REFERENCE = 500.0  # GeV, per-jet normalization target
MAX_PARTICLES = 128
SPACELIKE_TOL = 1e-6  # allowed E^2 deficit, relative to E^2

_BINARY_MAGIC = b"JETB"
_BINARY_VERSION = 1
_BINARY_SCHEMA = "px,py,pz,energy,type_flag"


class ClassLabel(IntEnum):
    BB = 0
    TAU_H_TAU_E = 1
    TAU_H_TAU_MU = 2
    TAU_H_TAU_H = 3
    QQB_BCS = 4
    QQ = 5
    QCD = 6


LABEL_NAMES = {
    ClassLabel.BB: "bb",
    ClassLabel.TAU_H_TAU_E: "tau_h tau_e",
    ClassLabel.TAU_H_TAU_MU: "tau_h tau_mu",
    ClassLabel.TAU_H_TAU_H: "tau_h tau_h",
    ClassLabel.QQB_BCS: "qqb_bcs",
    ClassLabel.QQ: "qq",
    ClassLabel.QCD: "QCD",
}
NAME_TO_LABEL = {v: k for k, v in LABEL_NAMES.items()}
N_CLASSES = len(ClassLabel)
SIGNAL_LABELS = [l for l in ClassLabel if l != ClassLabel.QCD]


class JetDataError(Exception):
    pass


class RejectedJetError(JetDataError):
    """Jet cannot be preprocessed (e.g., zero transverse momentum)."""


class MalformedRecordError(JetDataError):
    """A jet file record failed to parse; carries record index / byte offset."""


class KinematicClampStats:
    """Counts rapidity clamps applied when E <= |pz| (flagged events)."""

    def __init__(self):
        self.count = 0

    def bump(self, n=1):
        self.count += int(n)

    def reset(self):
        self.count = 0


KINEMATIC_CLAMPS = KinematicClampStats()


@dataclass(frozen=True)
class Particle:
    px: float
    py: float
    pz: float
    energy: float
    type_flag: int = CHARGED_HADRON

    def momentum(self):
        return np.array([self.px, self.py, self.pz, self.energy], dtype=np.float64)


@dataclass
class Jet:
    """Ordered particle cloud; the order carries no physical meaning."""

    momenta: np.ndarray  # [n, 4] float64: px, py, pz, E
    type_flags: np.ndarray  # [n] uint8
    label: int

    def __post_init__(self):
        self.momenta = np.asarray(self.momenta, dtype=np.float64)
        self.type_flags = np.asarray(self.type_flags, dtype=np.uint8)
        n = self.momenta.shape[0]
        if self.momenta.ndim != 2 or self.momenta.shape[1] != 4:
            raise JetDataError(f"momenta must be [n, 4], got {self.momenta.shape}")
        if not 1 <= n <= MAX_PARTICLES:
            raise JetDataError(f"particle count {n} outside [1, {MAX_PARTICLES}]")
        if self.type_flags.shape != (n,):
            raise JetDataError("type_flags length does not match particle count")

    @property
    def n_particles(self):
        return self.momenta.shape[0]

    def four_momentum(self):
        return self.momenta.sum(axis=0)

    def pt(self):
        p = self.four_momentum()
        return float(np.hypot(p[0], p[1]))

    def particles(self):
        return [Particle(*self.momenta[i], int(self.type_flags[i]))
                for i in range(self.n_particles)]

    @classmethod
    def from_particles(cls, particles, label):
        momenta = np.array([[p.px, p.py, p.pz, p.energy] for p in particles])
        flags = np.array([p.type_flag for p in particles], dtype=np.uint8)
        return cls(momenta, flags, int(label))

    def copy(self):
        return Jet(self.momenta.copy(), self.type_flags.copy(), self.label)


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------

def wrap_phi(phi):
    """Wrap angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(phi, dtype=np.float64), 2.0 * np.pi)


def kinematics_arrays(momenta):
    """Vectorized (pT, rapidity, phi, mass) for an [n, 4] momentum array.

    Rapidity uses E clamped to |pz| + 1e-12 when E <= |pz|; such events
    are counted in KINEMATIC_CLAMPS. Mass is sqrt(max(0, E^2 - |p|^2)).
    """
    momenta = np.asarray(momenta, dtype=np.float64)
    px, py, pz, e = momenta[:, 0], momenta[:, 1], momenta[:, 2], momenta[:, 3]
    pt = np.hypot(px, py)
    phi = wrap_phi(np.arctan2(py, px))
    clamped = e <= np.abs(pz)
    if np.any(clamped):
        KINEMATIC_CLAMPS.bump(np.count_nonzero(clamped))
        log.debug("rapidity clamp applied to %d particle(s)", np.count_nonzero(clamped))
    e_safe = np.maximum(e, np.abs(pz) + 1e-12)
    rapidity = 0.5 * np.log((e_safe + pz) / (e_safe - pz))
    mass = np.sqrt(np.maximum(e * e - (px * px + py * py + pz * pz), 0.0))
    return pt, rapidity, phi, mass


def kinematics(p: Particle):
    """(pT, rapidity, phi, mass) of a single particle."""
    pt, y, phi, m = kinematics_arrays(p.momentum()[None, :])
    return float(pt[0]), float(y[0]), float(phi[0]), float(m[0])


def jet_axis(jet: Jet):
    """(rapidity, phi) of the summed jet 4-momentum."""
    p = jet.four_momentum()
    pt, y, phi, _ = kinematics_arrays(p[None, :])
    return float(y[0]), float(phi[0])


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def normalize_jet(jet: Jet) -> Jet:
    """Rescale all particle 4-vectors so the jet pT equals 500 GeV."""
    jpt = jet.pt()
    if jpt <= 0.0:
        raise RejectedJetError("jet has zero transverse momentum")
    s = JET_PT_REFERENCE / jpt
    return Jet(jet.momenta * s, jet.type_flags.copy(), jet.label)


def _violation_mask(momenta):
    px, py, pz, e = momenta[:, 0], momenta[:, 1], momenta[:, 2], momenta[:, 3]
    bad = ~np.all(np.isfinite(momenta), axis=1)
    bad |= e < 0.0
    p2 = px * px + py * py + pz * pz
    # spacelike beyond tolerance: E^2 < |p|^2 - tol * E^2
    with np.errstate(invalid="ignore"):
        bad |= e * e < p2 - SPACELIKE_TOL * e * e
    return bad


def sanitize_report(jet: Jet, original: Jet):
    """Revert unphysical particles to their originals; return (jet, n_reverted).

    A particle is reverted when any component is NaN/Inf, its energy is
    negative, or it is spacelike beyond tolerance. Particle pairing with
    `original` is positional.
    """
    if jet.n_particles != original.n_particles:
        raise JetDataError("sanitize requires equal particle counts and pairing")
    bad = _violation_mask(jet.momenta)
    if not np.any(bad):
        return jet, 0
    momenta = jet.momenta.copy()
    flags = jet.type_flags.copy()
    momenta[bad] = original.momenta[bad]
    flags[bad] = original.type_flags[bad]
    return Jet(momenta, flags, jet.label), int(np.count_nonzero(bad))


def sanitize(jet: Jet, original: Jet) -> Jet:
    return sanitize_report(jet, original)[0]


# ---------------------------------------------------------------------------
# pairwise interaction features
# ---------------------------------------------------------------------------

def pairwise_matrix(jet: Jet):
    """[4, n, n] tensor of (ln dR, ln kT, ln z, ln m^2) for all pairs.

    Arguments of every logarithm are clamped below at 1e-8, so coincident
    particles sit at the sentinel ln(1e-8) instead of -inf. The diagonal
    is forced to the sentinel in all four channels. Every entry is an
    exactly symmetric function of the pair (|dphi| is computed from
    |phi_i - phi_j|, which floating-point negation keeps exact).
    """
    pt, y, phi, _ = kinematics_arrays(jet.momenta)
    dy = y[:, None] - y[None, :]
    adphi = np.mod(np.abs(phi[:, None] - phi[None, :]), 2.0 * np.pi)
    adphi = np.pi - np.abs(np.pi - adphi)
    dr = np.sqrt(dy * dy + adphi * adphi)
    minpt = np.minimum(pt[:, None], pt[None, :])
    kt = minpt * dr
    z = minpt / np.maximum(pt[:, None] + pt[None, :], LOG_FLOOR)
    e = jet.momenta[:, 3]
    esum = e[:, None] + e[None, :]
    psum = jet.momenta[:, None, :3] + jet.momenta[None, :, :3]
    m2 = esum * esum - np.einsum("ijk,ijk->ij", psum, psum)
    out = np.stack([
        np.log(np.maximum(dr, LOG_FLOOR)),
        np.log(np.maximum(kt, LOG_FLOOR)),
        np.log(np.maximum(z, LOG_FLOOR)),
        np.log(np.maximum(m2, LOG_FLOOR)),
    ])
    idx = np.arange(jet.n_particles)
    out[:, idx, idx] = LOG_FLOOR_SENTINEL
    return out


def pairwise_features(a: Particle, b: Particle):
    """(ln dR, ln kT, ln z, ln m^2) for one particle pair."""
    jet = Jet(np.stack([a.momentum(), b.momentum()]),
              np.array([a.type_flag, b.type_flag], dtype=np.uint8), 0)
    m = pairwise_matrix(jet)
    lndr, lnkt, _, lnm2 = m[0, 0, 1], m[1, 0, 1], m[2, 0, 1], m[3, 0, 1]
    # the off-diagonal z entry is min/(sum); recompute to keep the scalar
    # API exact even for the degenerate a == b case
    pt_a = np.hypot(a.px, a.py)
    pt_b = np.hypot(b.px, b.py)
    z = min(pt_a, pt_b) / max(pt_a + pt_b, LOG_FLOOR)
    return float(lndr), float(lnkt), float(np.log(max(z, LOG_FLOOR))), float(lnm2)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class JetBatch:
    features: np.ndarray      # [B, Nmax, N_FEATURES]
    mask: np.ndarray          # [B, Nmax], 1.0 = real particle
    interactions: np.ndarray  # [B, 4, Nmax, Nmax]
    labels: np.ndarray        # [B] int64

    @property
    def batch_size(self):
        return self.features.shape[0]

    @property
    def nmax(self):
        return self.features.shape[1]

    def type_targets(self):
        """[B, Nmax] integer type flag recovered from the one-hot block."""
        return np.argmax(self.features[:, :, N_FEATURES - N_TYPES:], axis=-1)


def jet_features(jet: Jet):
    """[n, 10] per-particle features relative to the jet axis."""
    pt, y, phi, _ = kinematics_arrays(jet.momenta)
    ax_y, ax_phi = jet_axis(jet)
    dy = y - ax_y
    dphi = wrap_phi(phi - ax_phi)
    dr = np.hypot(dy, dphi)
    onehot = np.zeros((jet.n_particles, N_TYPES))
    onehot[np.arange(jet.n_particles), jet.type_flags] = 1.0
    e = jet.momenta[:, 3]
    return np.column_stack([
        dy, dphi,
        np.log(np.maximum(pt, LOG_FLOOR)),
        np.log(np.maximum(e, LOG_FLOOR)),
        dr, onehot,
    ])


def truncate_to_nmax(jet: Jet, nmax: int) -> Jet:
    """Keep the nmax highest-pT particles, preserving their input order."""
    if jet.n_particles <= nmax:
        return jet
    pt = np.hypot(jet.momenta[:, 0], jet.momenta[:, 1])
    keep = np.sort(np.argsort(-pt, kind="stable")[:nmax])
    return Jet(jet.momenta[keep], jet.type_flags[keep], jet.label)


def build_batch(jets, nmax: int) -> JetBatch:
    """Assemble padded features, mask and interaction tensors for a batch."""
    if len(jets) == 0:
        raise JetDataError("cannot build a batch from zero jets")
    b = len(jets)
    features = np.zeros((b, nmax, N_FEATURES))
    mask = np.zeros((b, nmax))
    interactions = np.full((b, N_INTERACTION_FEATURES, nmax, nmax), LOG_FLOOR_SENTINEL)
    labels = np.zeros(b, dtype=np.int64)
    for i, jet in enumerate(jets):
        jet = truncate_to_nmax(jet, nmax)
        n = jet.n_particles
        features[i, :n] = jet_features(jet)
        mask[i, :n] = 1.0
        interactions[i, :, :n, :n] = pairwise_matrix(jet)
        labels[i] = jet.label
    return JetBatch(features, mask, interactions, labels)


# ---------------------------------------------------------------------------
# toy generator (stand-in for the out-of-scope large-scale dataset)
# ---------------------------------------------------------------------------

_TYPE_MASSES = np.array([0.140, 0.500, 0.0, 0.0005, 0.106])

# per class: prong count, prong separation range (dR from axis), prong width,
# multiplicity range, type mix, lepton flag for one-prong leptonic decays
_TOY_RECIPES = {
    ClassLabel.QCD: dict(prongs=1, sep=(0.0, 0.0), width=0.30, n=(25, 80),
                         types=(0.60, 0.25, 0.15, 0.0, 0.0), lepton=None),
    ClassLabel.BB: dict(prongs=2, sep=(0.15, 0.40), width=0.06, n=(18, 45),
                        types=(0.52, 0.20, 0.18, 0.05, 0.05), lepton=None),
    ClassLabel.QQ: dict(prongs=2, sep=(0.15, 0.40), width=0.14, n=(15, 40),
                        types=(0.60, 0.25, 0.15, 0.0, 0.0), lepton=None),
    ClassLabel.QQB_BCS: dict(prongs=3, sep=(0.10, 0.35), width=0.08, n=(22, 55),
                             types=(0.58, 0.22, 0.17, 0.015, 0.015), lepton=None),
    ClassLabel.TAU_H_TAU_E: dict(prongs=2, sep=(0.10, 0.35), width=0.03, n=(4, 12),
                                 types=(0.70, 0.10, 0.20, 0.0, 0.0), lepton=ELECTRON),
    ClassLabel.TAU_H_TAU_MU: dict(prongs=2, sep=(0.10, 0.35), width=0.03, n=(4, 12),
                                  types=(0.70, 0.10, 0.20, 0.0, 0.0), lepton=MUON),
    ClassLabel.TAU_H_TAU_H: dict(prongs=2, sep=(0.10, 0.35), width=0.03, n=(3, 12),
                                 types=(0.70, 0.10, 0.20, 0.0, 0.0), lepton=None),
}


def generate_toy_jet(label, rng) -> Jet:
    """Sample one jet whose structure depends on its class.

    Prong multiplicity, angular widths, pT sharing and type-flag
    composition are class-dependent so the seven classes are separable by
    construction. Particle count stays within [3, 100].
    """
    label = ClassLabel(label)
    r = _TOY_RECIPES[label]
    n = int(rng.integers(r["n"][0], r["n"][1] + 1))
    n = max(3, min(n, 100))

    jet_pt = rng.uniform(400.0, 600.0)
    ax_y = rng.uniform(-1.5, 1.5)
    ax_phi = rng.uniform(-np.pi, np.pi)

    n_prongs = r["prongs"]
    prong_angle = rng.uniform(0.0, 2.0 * np.pi)
    prong_dy = np.zeros(n_prongs)
    prong_dphi = np.zeros(n_prongs)
    for k in range(n_prongs):
        if n_prongs > 1:
            radius = rng.uniform(*r["sep"])
            theta = prong_angle + 2.0 * np.pi * k / n_prongs
            prong_dy[k] = radius * np.cos(theta)
            prong_dphi[k] = radius * np.sin(theta)

    lepton = r["lepton"]
    flags = rng.choice(N_TYPES, size=n, p=np.asarray(r["types"]))
    weights = rng.exponential(1.0, size=n)
    assignment = rng.integers(0, n_prongs, size=n)
    if lepton is not None:
        # one prong is a single hard lepton
        flags[0] = lepton
        assignment[0] = 0
        assignment[1:] = rng.integers(1, n_prongs, size=n - 1) if n_prongs > 1 else 0
        weights[0] = weights.sum() * rng.uniform(0.5, 1.2)
    weights /= weights.sum()
    pts = jet_pt * weights

    dy = prong_dy[assignment] + rng.normal(0.0, r["width"], size=n)
    dphi = prong_dphi[assignment] + rng.normal(0.0, r["width"], size=n)
    y = ax_y + dy
    phi = wrap_phi(ax_phi + dphi)

    masses = _TYPE_MASSES[flags]
    px = pts * np.cos(phi)
    py = pts * np.sin(phi)
    mt = np.sqrt(pts * pts + masses * masses)
    pz = mt * np.sinh(y)
    e = mt * np.cosh(y)
    return Jet(np.column_stack([px, py, pz, e]), flags.astype(np.uint8), int(label))


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def _is_jsonl_path(path):
    return str(path).endswith((".jsonl", ".json"))


def write_jets(path, jets):
    """Write jets to `path`; .jsonl/.json get the text format, else binary."""
    if _is_jsonl_path(path):
        with open(path, "w") as f:
            for jet in jets:
                rec = {
                    "label": LABEL_NAMES[ClassLabel(jet.label)],
                    "particles": [
                        {"px": float(m[0]), "py": float(m[1]), "pz": float(m[2]),
                         "energy": float(m[3]), "type_flag": int(t)}
                        for m, t in zip(jet.momenta, jet.type_flags)
                    ],
                }
                f.write(json.dumps(rec) + "\n")
        return
    with open(path, "wb") as f:
        schema = _BINARY_SCHEMA.encode()
        f.write(_BINARY_MAGIC)
        f.write(struct.pack("<HH", _BINARY_VERSION, len(schema)))
        f.write(schema)
        for jet in jets:
            n = jet.n_particles
            f.write(struct.pack("<IB", n, jet.label))
            block = np.zeros((n, 33), dtype=np.uint8)
            block[:, :32] = jet.momenta.astype("<f8").view(np.uint8).reshape(n, 32)
            block[:, 32] = jet.type_flags
            f.write(block.tobytes())


def read_jets(path):
    """Stream jets back from a file written by write_jets.

    Empty files yield an empty stream. Truncated or malformed records
    raise MalformedRecordError carrying the record index and byte offset.
    """
    with open(path, "rb") as f:
        head = f.read(4)
    if head == _BINARY_MAGIC:
        return _read_binary(path)
    return _read_jsonl(path)


def _read_binary(path):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) == 0:
        return
    off = 4
    if len(data) < 8:
        raise MalformedRecordError(f"truncated header at byte offset {len(data)}")
    version, schema_len = struct.unpack_from("<HH", data, off)
    off += 4
    if version != _BINARY_VERSION:
        raise MalformedRecordError(f"unsupported version {version}")
    schema = data[off:off + schema_len].decode()
    if len(data) < off + schema_len:
        raise MalformedRecordError(f"truncated header at byte offset {len(data)}")
    if schema != _BINARY_SCHEMA:
        raise MalformedRecordError(f"unexpected field schema {schema!r}")
    off += schema_len
    index = 0
    total = len(data)
    while off < total:
        if off + 5 > total:
            raise MalformedRecordError(
                f"truncated record {index} at byte offset {off}")
        n, label = struct.unpack_from("<IB", data, off)
        off += 5
        if not 1 <= n <= MAX_PARTICLES:
            raise MalformedRecordError(
                f"record {index} at byte offset {off - 5}: bad particle count {n}")
        if label >= N_CLASSES:
            raise MalformedRecordError(
                f"record {index} at byte offset {off - 5}: bad label code {label}")
        nbytes = n * 33
        if off + nbytes > total:
            raise MalformedRecordError(
                f"truncated record {index} at byte offset {off}")
        block = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=off).reshape(n, 33)
        momenta = block[:, :32].copy().view("<f8").astype(np.float64).reshape(n, 4)
        flags = block[:, 32].copy()
        off += nbytes
        yield Jet(momenta, flags, int(label))
        index += 1


def _read_jsonl(path):
    with open(path) as f:
        for index, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                label = rec["label"]
                label = NAME_TO_LABEL[label] if isinstance(label, str) else ClassLabel(label)
                momenta = np.array([[p["px"], p["py"], p["pz"], p["energy"]]
                                    for p in rec["particles"]])
                flags = np.array([p["type_flag"] for p in rec["particles"]], dtype=np.uint8)
                yield Jet(momenta, flags, int(label))
            except MalformedRecordError:
                raise
            except Exception as exc:
                raise MalformedRecordError(f"record {index}: {exc}") from exc
