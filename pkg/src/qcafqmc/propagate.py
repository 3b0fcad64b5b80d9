"""Phaseless AFQMC propagation with force-bias importance sampling.

One step for a walker ``phi`` with force bias ``xbar``:

    phi <- exp(-dt/2 v0) exp(i sqrt(dt) sum_g (x_g - xbar_g) L_g) exp(-dt/2 v0) phi
    w   <- w exp(-dt (Re E_L - E_shift)) max(0, cos arg(<Psi_T|phi'>/<Psi_T|phi>))

with ``x ~ N(0, 1)`` per Cholesky vector. The local energy in the weight is
refreshed every ``energy_interval`` steps and held in between.
"""

import csv
import hashlib
import io
import json
import logging
import os
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import expm

from .estimators import HamiltonianTerms, VanishingOverlapError, local_quantities
from .vce import DecoupledCoreError

logger = logging.getLogger(__name__)

FORCE_BIAS_CAP = 10.0
CHECKPOINT_MAGIC = b"QCAFCKPT"
CHECKPOINT_VERSION = 1

_RECOVERABLE = (VanishingOverlapError, DecoupledCoreError, np.linalg.LinAlgError, FloatingPointError)


class PopulationCollapseError(RuntimeError):
    pass


class IncompatibleCheckpointError(ValueError):
    pass


@dataclass
class Walker:
    V: np.ndarray
    weight: float
    overlap: complex = 0.0
    force_bias: np.ndarray = None  # <v_g>/<1>
    local_energy: complex = np.nan


@dataclass
class AFQMCConfig:
    dt: float = 0.01
    n_walkers: int = 128
    n_blocks: int = 150
    steps_per_block: int = 10
    n_equil: int = 50
    energy_interval: int = 1
    reorth_interval: int = 5
    seed: int = 0
    clip_energy: bool = True

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for name in ("n_walkers", "n_blocks", "steps_per_block", "energy_interval", "reorth_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class PropagatorContext:
    """Time step, one-body exponentials and the Cholesky list for a Hamiltonian."""

    def __init__(self, ham, dt):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.ham = ham
        self.dt = dt
        self.terms = HamiltonianTerms(ham)
        e, U = np.linalg.eigh(ham.v0)
        half = (U * np.exp(-0.5 * dt * e)) @ U.T
        self.exp_half_v0 = np.kron(half, np.eye(2))
        self.L = np.asarray(ham.L)  # spatial

    def field_exponential(self, shift):
        """``exp(i sqrt(dt) sum_g shift_g L_g)`` in spin-orbital form."""
        K = 1j * np.sqrt(self.dt) * np.tensordot(shift, self.L, axes=1)
        return np.kron(expm(K), np.eye(2))

    def propagate(self, V, shift):
        return self.exp_half_v0 @ (self.field_exponential(shift) @ (self.exp_half_v0 @ V))


def importance_factor(ov_new, ov_old, x, xbar):
    """Exact importance weight ``<B(x - xbar)>/<1> exp(x.xbar - xbar.xbar/2)``."""
    return ov_new / ov_old * np.exp(np.dot(x, xbar) - 0.5 * np.dot(xbar, xbar))


def phaseless_factor(ratio):
    """``max(0, cos(arg(ratio)))``."""
    return max(0.0, float(np.cos(np.angle(ratio))))


def clamp_force_bias(xbar, cap=FORCE_BIAS_CAP):
    mag = np.abs(xbar)
    big = mag > cap
    if np.any(big):
        logger.debug("clamping %d force-bias components", int(big.sum()))
        xbar = np.where(big, xbar / np.where(big, mag, 1.0) * cap, xbar)
    return xbar


def hartree_fock_orbitals(n_orb, n_alpha, n_beta):
    """Lowest-orbital determinant in interleaved spin-orbital form."""
    occ = sorted([2 * i for i in range(n_alpha)] + [2 * i + 1 for i in range(n_beta)])
    return np.eye(2 * n_orb, dtype=complex)[:, occ]


class AFQMC:
    """Walker ensemble, estimator and RNG; advances in blocks and keeps an EnergyTrace.

    ``pool`` (anything with an ordered ``map``) spreads per-walker work; all
    random numbers are drawn up front on the calling thread, so results do
    not depend on it.
    """

    def __init__(self, ham, estimator, config, V0=None, pool=None):
        self.pool = pool
        self.ham = ham
        self.est = estimator
        self.cfg = config
        self.ctx = PropagatorContext(ham, config.dt)
        self.rng = np.random.default_rng(config.seed)
        V0 = hartree_fock_orbitals(ham.n_orb, ham.n_alpha, ham.n_beta) if V0 is None else np.asarray(V0, complex)
        self.walkers = [Walker(V0.copy(), 1.0) for _ in range(config.n_walkers)]
        self.step_count = 0
        self.block = 0
        self.trace = EnergyTrace(meta={"dt": config.dt, "n_walkers": config.n_walkers, "seed": config.seed,
                                       "steps_per_block": config.steps_per_block})
        # all walkers start from the same determinant: evaluate once
        first = self.walkers[0]
        self._refresh(first, energy=True)
        for w in self.walkers[1:]:
            w.weight, w.overlap, w.local_energy = first.weight, first.overlap, first.local_energy
            w.force_bias = None if first.force_bias is None else first.force_bias.copy()
        live = [w for w in self.walkers if w.weight > 0]
        if not live:
            raise PopulationCollapseError("initial walker has vanishing overlap with the trial")
        self.e_shift = float(np.real(live[0].local_energy))

    # ---- per-walker pieces ----
    def _refresh(self, w, energy):
        try:
            lq = local_quantities(self.est, self.ctx.terms, w.V, energy=energy)
        except _RECOVERABLE as exc:
            logger.debug("walker killed: %s", exc)
            w.weight = 0.0
            return False
        w.overlap = lq.overlap
        w.force_bias = lq.force_bias
        if energy:
            w.local_energy = lq.local_energy
        return True

    def _clipped_energy(self, e):
        e = float(np.real(e))
        if self.cfg.clip_energy:
            lim = np.sqrt(2.0 / self.cfg.dt)
            e = min(max(e, self.e_shift - lim), self.e_shift + lim)
        return e

    def _advance(self, w, x, energy_now, reorth):
        if w.weight <= 0:
            return
        dt = self.cfg.dt
        xbar = clamp_force_bias(-np.sqrt(dt) * w.force_bias)
        old_ov = w.overlap
        w.V = self.ctx.propagate(w.V, x - xbar)
        if reorth:
            w.V = orthonormalize(w.V)
        if not self._refresh(w, energy_now):
            return
        # R has a positive diagonal, so re-orthonormalization rescales but never rotates the overlap
        ratio = w.overlap / old_ov
        e = self._clipped_energy(w.local_energy)
        w.weight *= np.exp(-dt * (e - self.e_shift)) * phaseless_factor(ratio)

    def _map(self, fn, *args):
        if self.pool is None:
            return list(map(fn, *args))
        return list(self.pool.map(fn, *args))

    def step(self):
        self.step_count += 1
        energy_now = self.step_count % self.cfg.energy_interval == 0
        reorth = self.step_count % self.cfg.reorth_interval == 0
        # one row per walker, dead or alive, so the stream is independent of deaths and of the pool
        xs = self.rng.standard_normal((len(self.walkers), self.ctx.L.shape[0]))
        self._map(lambda w, x: self._advance(w, x, energy_now, reorth), self.walkers, xs)

    def measure(self):
        """Weighted mean of local energies (real and imaginary parts)."""
        fresh = self.step_count % self.cfg.energy_interval == 0
        if not fresh:
            live = [w for w in self.walkers if w.weight > 0]
            self._map(lambda w: self._refresh(w, energy=True), live)
        num = 0.0 + 0.0j
        den = 0.0
        for w in self.walkers:
            if w.weight <= 0:
                continue
            num += w.weight * w.local_energy
            den += w.weight
        if den <= 0:
            raise PopulationCollapseError("total weight vanished")
        return num / den, den

    def run_block(self):
        for _ in range(self.cfg.steps_per_block):
            self.step()
        energy, total = self.measure()
        self.block += 1
        self.trace.append(self.block, energy, total, sum(w.weight > 0 for w in self.walkers))
        self.walkers = population_control(self.walkers, self.rng)
        # drift-free shift: running mean of block energies
        self.e_shift = float(np.mean(np.real(self.trace.energies)))
        return energy

    def run(self, n_blocks=None, checkpoint_path=None, checkpoint_every=0, stop_after=None):
        n_blocks = self.cfg.n_blocks if n_blocks is None else n_blocks
        t0 = time.perf_counter()
        while self.block < n_blocks:
            self.run_block()
            if checkpoint_path and checkpoint_every and self.block % checkpoint_every == 0:
                save_checkpoint(self, checkpoint_path)
            if stop_after is not None and self.block >= stop_after:
                break
        logger.info("%d blocks in %.1f s", self.block, time.perf_counter() - t0)
        return self.trace


def orthonormalize(V):
    """Q factor of ``V = QR`` with ``diag(R) > 0``."""
    q, r = np.linalg.qr(V)
    d = np.diag(r)
    return q * (d / np.abs(d))[None, :]


def population_control(walkers, rng):
    """Comb resampling to the same number of walkers with equal weights.

    The total weight is preserved exactly; zero-weight walkers are never chosen.
    """
    n = len(walkers)
    weights = np.array([w.weight for w in walkers], dtype=float)
    total = weights.sum()
    if not total > 0:
        raise PopulationCollapseError("total weight is zero")
    cum = np.cumsum(weights)
    teeth = (rng.random() + np.arange(n)) * (total / n)
    picks = np.searchsorted(cum, teeth, side="right")
    picks = np.minimum(picks, n - 1)
    # guard against landing on a zero-weight walker through rounding at the top end
    while np.any(weights[picks] == 0):
        bad = weights[picks] == 0
        picks[bad] -= 1
    out = []
    for i in picks:
        src = walkers[i]
        out.append(Walker(src.V.copy(), total / n, src.overlap, None if src.force_bias is None else src.force_bias.copy(),
                          src.local_energy))
    return out


# -- energy trace ----------------------------------------------------------------

@dataclass
class EnergyTrace:
    blocks: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    n_alive: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, block, energy, total_weight, n_alive):
        if self.blocks and block <= self.blocks[-1]:
            raise ValueError("block indices must increase")
        self.blocks.append(int(block))
        self.energies.append(complex(energy))
        self.weights.append(float(total_weight))
        self.n_alive.append(int(n_alive))

    def __len__(self):
        return len(self.blocks)

    @property
    def real_energies(self):
        return np.real(np.array(self.energies))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["block", "energy_re", "energy_im", "total_weight"])
            for b, e, w in zip(self.blocks, self.energies, self.weights):
                wr.writerow([b, repr(float(e.real)), repr(float(e.imag)), repr(w)])

    @classmethod
    def from_csv(cls, path):
        tr = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                tr.append(int(row["block"]), complex(float(row["energy_re"]), float(row["energy_im"])),
                          float(row["total_weight"]), 0)
        return tr


# -- checkpoint / restore --------------------------------------------------------

def run_hash(ham, cfg):
    """Hash of the Hamiltonian content and the run parameters that shape the trajectory."""
    h = hashlib.sha256()
    h.update(ham.content_hash().encode())
    keep = {k: v for k, v in asdict(cfg).items() if k not in ("n_blocks",)}
    h.update(json.dumps(keep, sort_keys=True).encode())
    return h.hexdigest()


def save_checkpoint(sim, path):
    """Atomically write walkers, weights, estimator caches, RNG state and the trace so far."""
    meta = {
        "hash": run_hash(sim.ham, sim.cfg),
        "config": asdict(sim.cfg),
        "step_count": sim.step_count,
        "block": sim.block,
        "e_shift": sim.e_shift,
        "rng": sim.rng.bit_generator.state,
        "trace_meta": sim.trace.meta,
        "trace_blocks": sim.trace.blocks,
        "trace_alive": sim.trace.n_alive,
    }
    buf = io.BytesIO()
    np.savez(
        buf,
        V=np.array([w.V for w in sim.walkers]),
        weight=np.array([w.weight for w in sim.walkers]),
        overlap=np.array([w.overlap for w in sim.walkers], dtype=complex),
        force_bias=np.array([w.force_bias for w in sim.walkers], dtype=complex),
        local_energy=np.array([w.local_energy for w in sim.walkers], dtype=complex),
        trace_energy=np.array(sim.trace.energies, dtype=complex),
        trace_weight=np.array(sim.trace.weights, dtype=float),
        meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
    )
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + digest + payload)
    os.replace(tmp, path)


def restore_checkpoint(path, ham, estimator, cfg, pool=None):
    """Rebuild an AFQMC object from a checkpoint, validating Hamiltonian and parameters."""
    with open(path, "rb") as fh:
        data = fh.read()
    head = len(CHECKPOINT_MAGIC) + 4 + 32
    if len(data) < head or data[:8] != CHECKPOINT_MAGIC:
        raise IncompatibleCheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    payload = data[head:]
    if hashlib.sha256(payload).digest() != data[12:head]:
        raise IncompatibleCheckpointError(f"{path}: checksum mismatch (corrupted file)")
    arrs = np.load(io.BytesIO(payload))
    meta = json.loads(arrs["meta"].tobytes().decode())
    if meta["hash"] != run_hash(ham, cfg):
        raise IncompatibleCheckpointError("checkpoint was written for a different Hamiltonian or parameters")
    sim = AFQMC.__new__(AFQMC)
    sim.pool = pool
    sim.ham, sim.est, sim.cfg = ham, estimator, cfg
    sim.ctx = PropagatorContext(ham, cfg.dt)
    sim.rng = np.random.default_rng()
    sim.rng.bit_generator.state = meta["rng"]
    sim.walkers = [
        Walker(V, float(wt), complex(ov), fb, complex(el))
        for V, wt, ov, fb, el in zip(arrs["V"], arrs["weight"], arrs["overlap"], arrs["force_bias"],
                                      arrs["local_energy"])
    ]
    sim.step_count = meta["step_count"]
    sim.block = meta["block"]
    sim.e_shift = meta["e_shift"]
    sim.trace = EnergyTrace(meta=meta["trace_meta"])
    for b, e, wt, n in zip(meta["trace_blocks"], arrs["trace_energy"], arrs["trace_weight"], meta["trace_alive"]):
        sim.trace.append(b, e, wt, n)
    return sim
