"""Freezing a doubly occupied core.

The synthetic system has one deep orbital that never mixes with the rest.
The trial is prepared only in the active space; the embedding estimator
puts the core back in for every full-space walker. Propagation still runs
in the full space, and the energy matches full FCI.
"""
from pathlib import Path

import numpy as np

from qcafqmc.analysis import analyze
from qcafqmc.estimators import ExactEstimator
from qcafqmc.focksim import exact_ground_state
from qcafqmc.integrals import build_embedded, load_fcidump
from qcafqmc.propagate import AFQMC, AFQMCConfig
from qcafqmc.vce import CorePartition, VCEEstimator

DATA = Path(__file__).resolve().parents[1] / "tests" / "data"

ints = load_fcidump(DATA / "synthetic_core.fcidump")
e_full, _ = exact_ground_state(ints)
system = build_embedded(ints, core=(0,), active=(1, 2, 3))
part = CorePartition.from_embedded(system)
e_act, psi_a = exact_ground_state(system.active_ints)
print(f"full FCI {e_full:.8f}, active-space FCI with core energy folded in {e_act:.8f}")

eta_a = int(psi_a.particle_numbers()[0])
vce = VCEEstimator(ExactEstimator(psi_a, eta_a), part)
print(f"{part.n_core_electrons} core electrons, {eta_a} active electrons, {2 * part.n_spatial} spin orbitals")

# start from the active-space Hartree-Fock determinant with the core filled
V0 = part.embed_active_orbitals(np.eye(6, dtype=complex)[:, :eta_a])
cfg = AFQMCConfig(n_walkers=16, n_blocks=40, n_equil=10, seed=1)
trace = AFQMC(system.full_ham, vce, cfg, V0=V0).run()
res = analyze(trace.real_energies, n_equil=10)
print(f"AFQMC with embedded exact trial: {res.mean:.8f} +/- {res.stderr:.1e}")
