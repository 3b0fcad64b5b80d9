"""Overlaps from a bag of classical shadows.

Collect matchgate shadows of the H2 ground state, then estimate the overlap
with a few random Slater determinants and compare with the exact inner
product. The error should shrink like one over the square root of the
number of shadows.
"""
from pathlib import Path

import numpy as np

from qcafqmc.estimators import ExactEstimator
from qcafqmc.focksim import build_trial, exact_ground_state
from qcafqmc.integrals import load_fcidump
from qcafqmc.overlap import ShadowEstimator
from qcafqmc.shadows import collect

DATA = Path(__file__).resolve().parents[1] / "tests" / "data"

ints = load_fcidump(DATA / "h2_sto3g.fcidump")
e0, psi = exact_ground_state(ints)
print(f"H2/STO-3G: {ints.n_orb} spatial orbitals, FCI energy {e0:.8f} Ha")

# 4 spin orbitals, 2 electrons; shadows are sampled from the dense state
shadows = collect(build_trial(psi, 2), 20000, seed=1)
print(f"collected {len(shadows)} shadows")

rng = np.random.default_rng(0)
exact = ExactEstimator(psi, 2)
est = ShadowEstimator(shadows)
for k in range(4):
    V = np.linalg.qr(rng.normal(size=(4, 2)) + 1j * rng.normal(size=(4, 2)))[0]
    got = est.estimate(V)
    ref = exact.overlap(V)
    print(f"walker {k}: shadow {got.value:.4f} +/- {got.stderr:.4f}   exact {ref:.4f}")

# the same walker against growing prefixes of the archive
V = np.linalg.qr(rng.normal(size=(4, 2)) + 1j * rng.normal(size=(4, 2)))[0]
ref = exact.overlap(V)
print("\n   shadows   |error|   stderr")
for n in (500, 2000, 8000, 20000):
    e = ShadowEstimator(shadows[:n]).estimate(V)
    print(f"{n:10d}  {abs(e.value - ref):.5f}  {e.stderr:.5f}")
