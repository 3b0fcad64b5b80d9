"""Command-line workflow: prepare -> shadows -> run -> analyze, plus rdm.

Settings come from built-in defaults, then an INI file (``--config``), then
environment variables ``QCAFQMC_<SECTION>_<KEY>``, then command-line flags.
Each subcommand leaves existing outputs alone unless ``--force`` is given.

Exit codes: 0 ok, 2 missing or unreadable input, 3 capacity, 4 numerical
failure, 5 incompatible checkpoint.
"""

import argparse
import configparser
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import shadows as shadow_io
from .analysis import InsufficientDataError, analyze
from .estimators import ExactEstimator, UnsupportedConfigurationError, VanishingOverlapError
from .focksim import (
    MAX_DENSE_QUBITS,
    CapacityError,
    FockState,
    build_trial,
    exact_ground_state,
    load_amplitudes,
    save_amplitudes,
)
from .integrals import (
    CacheFormatError,
    InconsistentIntegralsError,
    MalformedInputError,
    NotPSDError,
    PartitionError,
    build_embedded,
    cholesky_factorize,
    load_cholesky,
    load_fcidump,
    save_cholesky,
)
from .overlap import ShadowEstimator
from .pfaffian import SingularPfaffianError
from .propagate import (
    AFQMC,
    AFQMCConfig,
    EnergyTrace,
    IncompatibleCheckpointError,
    PopulationCollapseError,
    restore_checkpoint,
    save_checkpoint,
)
from .rdm import estimate_1rdm, particle_number
from .vce import CorePartition, DecoupledCoreError, VCEEstimator

logger = logging.getLogger("qcafqmc")

EXIT_OK, EXIT_MISSING, EXIT_CAPACITY, EXIT_NUMERICAL, EXIT_CHECKPOINT = 0, 2, 3, 4, 5
ENV_PREFIX = "QCAFQMC_"
PARTICLE_WARN = 0.1


class MissingInputError(FileNotFoundError):
    pass


@dataclass
class RunConfig:
    fcidump: str = ""
    trial: str = ""  # optional amplitude file; default is the active-space ground state
    shadow_archive: str = ""
    checkpoint: str = ""
    output_dir: str = "qcafqmc_out"
    core: tuple = ()
    active: tuple = ()  # empty means every non-core orbital
    n_shadows: int = 100000
    shadow_seed: int = 0
    mode: str = "exact"  # exact | shadows
    vce: str = "auto"  # auto | on | off
    dt: float = 0.01
    n_walkers: int = 128
    n_blocks: int = 150
    steps_per_block: int = 10
    n_equil: int = 50
    energy_interval: int = 0  # 0: 1 for the exact oracle, 10 for shadows
    reorth_interval: int = 5
    seed: int = 0
    checkpoint_every: int = 1
    threads: int = 1
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("n_shadows", "n_walkers", "n_blocks", "steps_per_block", "reorth_interval",
                     "checkpoint_every", "threads"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_equil < 0 or self.energy_interval < 0:
            raise ValueError("n_equil and energy_interval must be non-negative")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.mode not in ("exact", "shadows"):
            raise ValueError(f"mode must be 'exact' or 'shadows', got {self.mode!r}")
        if self.vce not in ("auto", "on", "off"):
            raise ValueError(f"vce must be auto, on or off, got {self.vce!r}")

    def path(self, name):
        return os.path.join(self.output_dir, name)

    @property
    def shadow_path(self):
        return self.shadow_archive or self.path("shadows.shd")

    @property
    def checkpoint_path(self):
        return self.checkpoint or self.path("checkpoint.ckpt")

    def afqmc(self):
        k = self.energy_interval or (10 if self.mode == "shadows" else 1)
        return AFQMCConfig(self.dt, self.n_walkers, self.n_blocks, self.steps_per_block, self.n_equil, k,
                           self.reorth_interval, self.seed)


# (section, key) -> (RunConfig field, parser)
def _ints(text):
    return tuple(int(t) for t in text.replace(",", " ").split())


_KEYS = {
    ("paths", "fcidump"): ("fcidump", str),
    ("paths", "trial"): ("trial", str),
    ("paths", "shadows"): ("shadow_archive", str),
    ("paths", "checkpoint"): ("checkpoint", str),
    ("paths", "output_dir"): ("output_dir", str),
    ("system", "core"): ("core", _ints),
    ("system", "active"): ("active", _ints),
    ("shadows", "count"): ("n_shadows", int),
    ("shadows", "seed"): ("shadow_seed", int),
    ("estimator", "mode"): ("mode", str),
    ("estimator", "vce"): ("vce", str),
    ("afqmc", "dt"): ("dt", float),
    ("afqmc", "walkers"): ("n_walkers", int),
    ("afqmc", "blocks"): ("n_blocks", int),
    ("afqmc", "steps_per_block"): ("steps_per_block", int),
    ("afqmc", "n_equil"): ("n_equil", int),
    ("afqmc", "energy_interval"): ("energy_interval", int),
    ("afqmc", "reorth_interval"): ("reorth_interval", int),
    ("afqmc", "seed"): ("seed", int),
    ("afqmc", "checkpoint_every"): ("checkpoint_every", int),
}


def load_config(path=None, environ=None, overrides=None):
    """Defaults < INI file < ``QCAFQMC_SECTION_KEY`` environment < ``overrides``."""
    values = {}
    if path:
        if not os.path.exists(path):
            raise MissingInputError(f"config file not found: {path}")
        cp = configparser.ConfigParser()
        cp.read(path)
        for section in cp.sections():
            for key, text in cp.items(section):
                if (section, key) not in _KEYS:
                    raise ValueError(f"{path}: unknown setting [{section}] {key}")
                name, parse = _KEYS[(section, key)]
                values[name] = parse(text)
    env = os.environ if environ is None else environ
    for (section, key), (name, parse) in _KEYS.items():
        var = f"{ENV_PREFIX}{section}_{key}".upper()
        if var in env:
            values[name] = parse(env[var])
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values)


# -- shared loading -----------------------------------------------------------

def _need(path, what):
    if not path or not os.path.exists(path):
        raise MissingInputError(f"{what} not found: {path or '(not set)'}")
    return path


def _system_summary(cfg):
    return json.load(open(_need(cfg.path("system.json"), "prepared system (run 'prepare' first)")))


def _use_vce(cfg, summary):
    if cfg.vce == "auto":
        return bool(summary["core"] or summary["virtual"])
    return cfg.vce == "on"


def _load_trial(cfg, summary):
    n = 2 * len(summary["active"])
    psi = load_amplitudes(_need(cfg.path("trial.amp"), "trial amplitudes (run 'prepare' first)"), n)
    return build_trial(psi, summary["eta_active"])


def _estimator(cfg, summary, trial):
    """Estimator and Hamiltonian for the configured mode."""
    vce = _use_vce(cfg, summary)
    if cfg.mode == "shadows":
        archive = shadow_io.load(_need(cfg.shadow_path, "shadow archive (run 'shadows' first)"))
        if len(archive) < cfg.n_shadows:
            logger.warning("archive holds %d shadows, fewer than the configured %d", len(archive), cfg.n_shadows)
        active_est = ShadowEstimator(archive)
    else:
        active_est = ExactEstimator(trial.psi_t, trial.eta)
    if vce:
        part = CorePartition(summary["n_orb"], tuple(summary["core"]), tuple(summary["active"]),
                             tuple(summary["virtual"]))
        ham = load_cholesky(_need(cfg.path("cholesky_full.bin"), "Cholesky cache"))
        return ham, VCEEstimator(active_est, part)
    ham = load_cholesky(_need(cfg.path("cholesky_active.bin"), "Cholesky cache"))
    return ham, active_est


def _initial_orbitals(summary, ham, vce):
    """Lowest-orbital determinant in the propagation space (core orbitals first)."""
    if not vce:
        return None
    order = list(summary["core"]) + list(summary["active"]) + list(summary["virtual"])
    na, nb = ham.n_alpha, ham.n_beta
    occ = sorted([2 * order[i] for i in range(na)] + [2 * order[i] + 1 for i in range(nb)])
    return np.eye(2 * ham.n_orb, dtype=complex)[:, occ]


def _exists(cfg, paths, what):
    have = [p for p in paths if os.path.exists(p)]
    if have and not cfg.extra.get("force"):
        print(f"{what}: outputs already exist ({', '.join(have)}); use --force to redo")
        return True
    return False


# -- subcommands ----------------------------------------------------------------

def cmd_prepare(cfg):
    ints = load_fcidump(_need(cfg.fcidump, "FCIDUMP"))
    active = cfg.active or tuple(i for i in range(ints.n_orb) if i not in set(cfg.core))
    outputs = [cfg.path(n) for n in ("system.json", "trial.amp", "cholesky_full.bin", "cholesky_active.bin")]
    if _exists(cfg, outputs, "prepare"):
        return EXIT_OK
    if cfg.extra.get("fci") and 2 * ints.n_orb > MAX_DENSE_QUBITS:
        raise CapacityError(f"--fci: {2 * ints.n_orb} spin orbitals exceed the dense budget of {MAX_DENSE_QUBITS}")
    emb = build_embedded(ints, cfg.core, active)
    os.makedirs(cfg.output_dir, exist_ok=True)
    save_cholesky(emb.full_ham, cfg.path("cholesky_full.bin"))
    active_ham = cholesky_factorize(emb.active_ints)
    save_cholesky(active_ham, cfg.path("cholesky_active.bin"))
    n_act = 2 * len(emb.active)
    eta = emb.active_ints.n_alpha + emb.active_ints.n_beta
    if cfg.trial:
        psi = load_amplitudes(_need(cfg.trial, "trial amplitude file"), n_act)
        source = cfg.trial
    else:
        _, psi = exact_ground_state(emb.active_ints)
        source = "active-space ground state"
    build_trial(psi, eta)  # validates the electron-number sector
    save_amplitudes(psi, cfg.path("trial.amp"))
    summary = {
        "n_orb": emb.n_full, "core": list(emb.core), "active": list(emb.active), "virtual": list(emb.virtual),
        "n_alpha": ints.n_alpha, "n_beta": ints.n_beta, "eta_active": eta,
        "n_chol_full": emb.full_ham.n_chol, "hamiltonian_hash": emb.full_ham.content_hash(), "trial": source,
    }
    if 2 * ints.n_orb <= MAX_DENSE_QUBITS:
        e_fci, _ = exact_ground_state(ints)
        summary["e_fci"] = e_fci
        print(f"FCI energy: {e_fci:.10f} Ha")
    else:
        print(f"FCI reference skipped: {2 * ints.n_orb} spin orbitals exceed the dense budget")
    with open(cfg.path("system.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"prepared {emb.n_full} orbitals (core {list(emb.core)}, active {list(emb.active)}), "
          f"{emb.full_ham.n_chol} Cholesky vectors -> {cfg.output_dir}")
    return EXIT_OK


def cmd_shadows(cfg, pool=None):
    summary = _system_summary(cfg)
    trial = _load_trial(cfg, summary)
    path = cfg.shadow_path
    existing = None
    if os.path.exists(path) and not cfg.extra.get("force"):
        existing = shadow_io.load(path)
        if existing.seed != cfg.shadow_seed or existing.n_qubits != trial.n_qubits or existing.eta != trial.eta:
            raise shadow_io.ArchiveError(f"{path} was collected with different settings; use --force")
        if len(existing) >= cfg.n_shadows:
            print(f"shadows: {path} already holds {len(existing)} shadows; use --force to recollect")
            return EXIT_OK
    start = 0 if existing is None else len(existing)
    delta = cfg.n_shadows - start
    t0 = time.perf_counter()
    new = shadow_io.collect(trial, delta, cfg.shadow_seed, start=start, pool=pool)
    rate = delta / max(time.perf_counter() - t0, 1e-9)
    full = new if existing is None else existing.extend(new)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    shadow_io.save(full, path)
    print(f"collected {delta} shadows ({rate:.0f}/s); archive {path} holds {len(full)}")
    rdm = estimate_1rdm(full)
    tr = particle_number(rdm)
    print(f"particle number {tr:.4f} +/- {rdm.trace_stderr:.4f} (eta = {trial.eta})")
    if abs(tr - trial.eta) > PARTICLE_WARN:
        logger.warning("particle number %.4f deviates from %d by more than %.1f: shadows look noisy",
                       tr, trial.eta, PARTICLE_WARN)
    return EXIT_OK


def _report(cfg, trace, summary):
    try:
        res = analyze(trace.real_energies, cfg.n_equil)
    except InsufficientDataError as exc:
        print(f"analysis skipped: {exc}")
        return None
    line = f"E = {res.mean:.6f} +/- {res.stderr:.6f} Ha ({res.n_used} blocks, block size {res.block_size})"
    if "e_fci" in summary:
        line += f"; FCI {summary['e_fci']:.6f}, diff {1000 * (res.mean - summary['e_fci']):+.3f} mHa"
    print(line)
    with open(cfg.path("analysis.json"), "w") as fh:
        json.dump({"mean": res.mean, "stderr": res.stderr, "n_used": res.n_used, "removed": list(res.removed),
                   "block_size": res.block_size, "plateau_found": res.plateau_found}, fh, indent=2)
    return res


def cmd_run(cfg, pool=None):
    summary = _system_summary(cfg)
    trace_path = cfg.path("trace.csv")
    restore = cfg.extra.get("restore")
    if not restore and _exists(cfg, [trace_path], "run"):
        return EXIT_OK
    trial = _load_trial(cfg, summary)
    ham, est = _estimator(cfg, summary, trial)
    acfg = cfg.afqmc()
    ckpt = cfg.checkpoint_path
    if restore:
        sim = restore_checkpoint(_need(ckpt, "checkpoint"), ham, est, acfg, pool=pool)
        print(f"restored block {sim.block} from {ckpt}")
    else:
        V0 = _initial_orbitals(summary, ham, _use_vce(cfg, summary))
        sim = AFQMC(ham, est, acfg, V0=V0, pool=pool)
    t0 = time.perf_counter()
    stop = cfg.extra.get("stop_after")
    sim.run(checkpoint_path=ckpt, checkpoint_every=cfg.checkpoint_every, stop_after=stop)
    save_checkpoint(sim, ckpt)
    sim.trace.to_csv(trace_path)
    with open(cfg.path("run_meta.json"), "w") as fh:
        json.dump({"config": asdict(acfg), "mode": cfg.mode, "vce": _use_vce(cfg, summary),
                   "finished": time.strftime("%Y-%m-%dT%H:%M:%S"), "seconds": time.perf_counter() - t0,
                   "blocks": sim.block}, fh, indent=2)
    print(f"{sim.block} blocks -> {trace_path}")
    if sim.block >= acfg.n_blocks:
        _report(cfg, sim.trace, summary)
    return EXIT_OK


def cmd_analyze(cfg):
    trace = EnergyTrace.from_csv(_need(cfg.path("trace.csv"), "energy trace (run 'run' first)"))
    summary = json.load(open(cfg.path("system.json"))) if os.path.exists(cfg.path("system.json")) else {}
    res = _report(cfg, trace, summary)
    return EXIT_OK if res is not None else EXIT_NUMERICAL


def cmd_rdm(cfg):
    out = cfg.path("rdm.csv")
    archive = shadow_io.load(_need(cfg.shadow_path, "shadow archive"))
    if _exists(cfg, [out], "rdm"):
        return EXIT_OK
    rdm = estimate_1rdm(archive)
    os.makedirs(cfg.output_dir, exist_ok=True)
    rdm.to_csv(out)
    tr = particle_number(rdm)
    print(f"1-RDM from {rdm.n_samples} shadows -> {out}")
    print(f"particle number {tr:.4f} +/- {rdm.trace_stderr:.4f} (eta = {archive.eta})")
    if abs(tr - archive.eta) > PARTICLE_WARN:
        logger.warning("particle number deviates from %d by more than %.1f", archive.eta, PARTICLE_WARN)
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

_ERRORS = [
    ((MissingInputError, FileNotFoundError, MalformedInputError, InconsistentIntegralsError, PartitionError,
      CacheFormatError, shadow_io.ArchiveError), EXIT_MISSING),
    ((CapacityError, UnsupportedConfigurationError), EXIT_CAPACITY),
    ((PopulationCollapseError, VanishingOverlapError, DecoupledCoreError, SingularPfaffianError, NotPSDError,
      np.linalg.LinAlgError), EXIT_NUMERICAL),
    ((IncompatibleCheckpointError,), EXIT_CHECKPOINT),
]


def _global_flags(p, suppress=False):
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--config", help="INI file with [paths] [system] [shadows] [estimator] [afqmc] sections", **kw)
    p.add_argument("--seed", type=int, help="seed for this subcommand's random stream", **kw)
    p.add_argument("--threads", type=int, help="worker threads (default 1)", **kw)
    p.add_argument("--force", action="store_true", help="redo work even if outputs exist", **kw)
    p.add_argument("--output-dir", help="directory for all artifacts", **kw)
    p.add_argument("-v", "--verbose", action="count", **(kw or {"default": 0}))


def build_parser():
    p = argparse.ArgumentParser(prog="qcafqmc", description=__doc__.split("\n")[0])
    _global_flags(p)
    # the same flags may also follow the subcommand
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = p.add_subparsers(dest="command", required=True)
    add = lambda name, text: sub.add_parser(name, help=text, parents=[common])
    prep = add("prepare", "factorize integrals, build the trial, print the FCI reference")
    prep.add_argument("--fcidump")
    prep.add_argument("--core", type=_ints)
    prep.add_argument("--active", type=_ints)
    prep.add_argument("--trial", help="amplitude file ('bitstring re im' per line)")
    prep.add_argument("--fci", action="store_true", help="require the FCI reference (capacity error if too large)")
    sh = add("shadows", "collect or extend the shadow archive")
    sh.add_argument("--count", type=int)
    run = add("run", "phaseless AFQMC propagation")
    run.add_argument("--restore", action="store_true", help="continue from the checkpoint")
    run.add_argument("--mode", choices=["exact", "shadows"])
    run.add_argument("--blocks", type=int)
    run.add_argument("--walkers", type=int)
    run.add_argument("--stop-after", type=int, help="stop after this many blocks (for staged runs)")
    add("analyze", "equilibration cut, spike removal and reblocking of the trace")
    add("rdm", "one-particle density matrix and particle number from the shadows")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    over = {"output_dir": args.output_dir, "threads": args.threads}
    extra = {"force": args.force}
    cmd = args.command
    if cmd == "prepare":
        over.update(fcidump=args.fcidump, core=args.core, active=args.active, trial=args.trial)
        extra["fci"] = args.fci
    elif cmd == "shadows":
        over.update(n_shadows=args.count, shadow_seed=args.seed)
    elif cmd == "run":
        over.update(mode=args.mode, n_blocks=args.blocks, n_walkers=args.walkers, seed=args.seed)
        extra.update(restore=args.restore, stop_after=args.stop_after)
    try:
        cfg = load_config(args.config, overrides=over)
    except MissingInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    cfg.extra = extra
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        if cmd == "prepare":
            return cmd_prepare(cfg)
        if cmd == "shadows":
            return cmd_shadows(cfg, pool)
        if cmd == "run":
            return cmd_run(cfg, pool)
        if cmd == "analyze":
            return cmd_analyze(cfg)
        return cmd_rdm(cfg)
    except Exception as exc:
        for kinds, code in _ERRORS:
            if isinstance(exc, kinds):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise
    finally:
        if pool is not None:
            pool.shutdown()


if __name__ == "__main__":
    sys.exit(main())
