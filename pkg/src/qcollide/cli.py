"""Command-line entry point: validated JSON run configs, deterministic outputs.

Output formats (all LF line endings, numbers as 17-significant-digit decimals):
  trajectory_#####.ndjson  one step-record object per line
                           {"time","outcome","observables","norm_drift"}
  ensemble.csv             time, then mean_/var_/stderr_ per observable
  histogram.csv            bin_left, bin_right, count
  compare.csv              time, collision mean/stderr, oracle column(s), z
  spectrum.csv             omega, kappa_sq [, lorentzian_ref]
  manifest.json            config echo, version, seed, wall clock, checksums

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time as _time
from pathlib import Path

import numpy as np

from . import __version__
from .basis import CapacityError, ModeLayout
from .collision import Homodyne, MeasurementError, Photodetection
from .engine import (
    CountingSpec,
    EngineError,
    TrajectoryConfig,
    run_ensemble,
    run_trajectory,
)
from .model import (
    DrivenQubit,
    ExponentialCoupling,
    PointCoupling,
    RawCoupling,
    Squeezer,
    TwoPointFeedback,
    build_coupling,
    coupling_spectrum,
    lorentzian_density,
)
from .oracles import (
    CalibrationError,
    DDESpec,
    LindbladSpec,
    McwfConfig,
    OracleError,
    dense_system_h,
    feedback_dde,
    jc_pseudomode,
    lindblad_solve,
    mcwf_ensemble,
    qubit_population,
    single_excitation_schrodinger,
)
from .propagator import PropagatorConfig, PropagatorError


class RunConfigError(ValueError):
    pass


def _fmt(x) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# schema validation

_SCHEMA = {
    "mode": str,
    "out_dir": str,
    "seed": int,
    "dt": float,
    "n_steps": int,
    "trajectories": int,
    "sample_trajectories": int,
    "threads": int,
    "batch_size": int,
    "rho_stride": int,
    "observables": list,
    "initial_system": (str, list),
    "layout": {
        "system_dim": int, "env_count": int, "env_cap": int, "lo_dim": int,
    },
    "coupling": {
        "kind": str, "rate": float, "phase": float, "delay_steps": int,
        "memory_rate": float, "gammas": list,
    },
    "system_h": {"kind": str, "rabi": float, "strength": float},
    "scheme": {"kind": str, "amplitude": float, "phase": float},
    "propagator": {"method": str, "rtol": float, "max_substeps": int},
    "counting": {
        "burn_in": float, "window": float, "bin_width": float, "center": float,
    },
    "oracle": {
        "kind": str, "ports": int, "cavity_levels": int, "oracle_dt": float,
    },
}

_MODES = ("trajectory", "ensemble", "oracle", "compare", "spectrum")


def _validate(node, schema, path):
    if not isinstance(node, dict):
        raise RunConfigError(f"{path}: expected a table, got {type(node).__name__}")
    for key, value in node.items():
        if key not in schema:
            raise RunConfigError(f"{path}: unknown key {key!r}")
        expected = schema[key]
        if isinstance(expected, dict):
            _validate(value, expected, f"{path}.{key}")
        elif expected is float:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise RunConfigError(
                    f"{path}.{key}: expected number, got {type(value).__name__}"
                )
        elif not isinstance(value, expected) or isinstance(value, bool) and expected is int:
            name = (expected.__name__ if isinstance(expected, type)
                    else " or ".join(t.__name__ for t in expected))
            raise RunConfigError(
                f"{path}.{key}: expected {name}, got {type(value).__name__}"
            )


def _require(d, key, path):
    if key not in d:
        raise RunConfigError(f"{path}: missing required key {key!r}")
    return d[key]


def _build_coupling_variant(d):
    kind = _require(d, "kind", "config.coupling")
    if kind == "point":
        return PointCoupling(rate=float(_require(d, "rate", "config.coupling")))
    if kind == "two_point_feedback":
        return TwoPointFeedback(
            rate=float(_require(d, "rate", "config.coupling")),
            phase=float(d.get("phase", 0.0)),
            delay_steps=int(_require(d, "delay_steps", "config.coupling")),
        )
    if kind == "exponential":
        return ExponentialCoupling(
            rate=float(_require(d, "rate", "config.coupling")),
            memory_rate=float(_require(d, "memory_rate", "config.coupling")),
        )
    if kind == "raw":
        pairs = _require(d, "gammas", "config.coupling")
        return RawCoupling(gammas=tuple(complex(p[0], p[1]) for p in pairs))
    raise RunConfigError(f"config.coupling.kind: unknown kind {kind!r}")


def _build_system_h(d):
    kind = d.get("kind", "none")
    if kind == "none":
        return None
    if kind == "driven_qubit":
        return DrivenQubit(rabi=float(_require(d, "rabi", "config.system_h")))
    if kind == "squeezer":
        return Squeezer(strength=float(_require(d, "strength", "config.system_h")))
    raise RunConfigError(f"config.system_h.kind: unknown kind {kind!r}")


def _build_scheme(d):
    kind = _require(d, "kind", "config.scheme")
    if kind == "photodetection":
        return Photodetection()
    if kind == "homodyne":
        return Homodyne(
            amplitude=float(_require(d, "amplitude", "config.scheme")),
            phase=float(d.get("phase", 0.0)),
        )
    raise RunConfigError(f"config.scheme.kind: unknown kind {kind!r}")


class RunConfig:
    """Validated run configuration (mode + trajectory config + outputs)."""

    def __init__(self, raw: dict):
        _validate(raw, _SCHEMA, "config")
        self.raw = raw
        self.mode = _require(raw, "mode", "config")
        if self.mode not in _MODES:
            raise RunConfigError(
                f"config.mode: unknown mode {self.mode!r}, expected one of {_MODES}"
            )
        self.out_dir = Path(raw.get("out_dir", "out"))
        self.threads = int(raw.get("threads", 1))
        self.trajectories = int(raw.get("trajectories", 1))
        self.sample_trajectories = int(raw.get("sample_trajectories", 0))
        lay_d = _require(raw, "layout", "config")
        try:
            self.layout = ModeLayout(
                system_dim=int(_require(lay_d, "system_dim", "config.layout")),
                env_count=int(_require(lay_d, "env_count", "config.layout")),
                env_cap=int(_require(lay_d, "env_cap", "config.layout")),
                lo_dim=int(lay_d.get("lo_dim", 0)),
            )
            self.coupling = _build_coupling_variant(_require(raw, "coupling", "config"))
            self.system_h = _build_system_h(raw.get("system_h", {"kind": "none"}))
            self.scheme = _build_scheme(_require(raw, "scheme", "config"))
            prop = raw.get("propagator", {})
            self.propagator = PropagatorConfig(
                method=prop.get("method", "auto"),
                rtol=float(prop.get("rtol", 1e-10)),
                max_substeps=int(prop.get("max_substeps", 1024)),
            )
            dt = _require(raw, "dt", "config")
            if not dt > 0:
                raise RunConfigError("config.dt: must be > 0")
            initial = raw.get("initial_system", "excited")
            if isinstance(initial, list):
                initial = tuple(complex(p[0], p[1]) for p in initial)
            self.trajectory_config = TrajectoryConfig(
                layout=self.layout,
                coupling=self.coupling,
                system_h=self.system_h,
                scheme=self.scheme,
                dt=float(dt),
                n_steps=int(_require(raw, "n_steps", "config")),
                master_seed=int(raw.get("seed", 0)),
                observables=tuple(raw.get("observables", ["n"])),
                rho_stride=int(raw.get("rho_stride", 0)),
                initial_system=initial,
                propagator=self.propagator,
                batch_size=int(raw.get("batch_size", 0)),
            )
        except RunConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise RunConfigError(f"config: {exc}") from exc
        cdict = raw.get("counting")
        self.counting = None
        if cdict is not None:
            self.counting = CountingSpec(
                burn_in=float(_require(cdict, "burn_in", "config.counting")),
                window=float(_require(cdict, "window", "config.counting")),
                bin_width=float(cdict.get("bin_width", 1.0)),
                center=float(cdict.get("center", 0.0)),
            )
        self.oracle = raw.get("oracle")
        if self.mode in ("oracle", "compare") and self.oracle is None:
            raise RunConfigError(f"config: mode {self.mode!r} requires an 'oracle' table")

    def echo(self) -> dict:
        d = dict(self.trajectory_config.to_dict())
        d["mode"] = self.mode
        d["out_dir"] = str(self.out_dir)
        d["threads"] = self.threads
        d["trajectories"] = self.trajectories
        d["sample_trajectories"] = self.sample_trajectories
        if self.counting is not None:
            d["counting"] = {
                "burn_in": self.counting.burn_in, "window": self.counting.window,
                "bin_width": self.counting.bin_width, "center": self.counting.center,
            }
        if self.oracle is not None:
            d["oracle"] = dict(self.oracle)
        return d


def parse_config(path) -> RunConfig:
    """Load and validate a JSON run configuration file."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise RunConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise RunConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig(raw)


def config_from_dict(raw: dict) -> RunConfig:
    return RunConfig(raw)


# ---------------------------------------------------------------------------
# deterministic writers

def _write_text(path: Path, text: str):
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _ndjson_line(record) -> str:
    obs = ", ".join(
        f'"{k}": {_fmt(v)}' for k, v in sorted(record.observables.items())
    )
    return (f'{{"time": {_fmt(record.time)}, "outcome": {_fmt(record.outcome)}, '
            f'"observables": {{{obs}}}, "norm_drift": {_fmt(record.norm_drift)}}}')


def write_trajectory_ndjson(path: Path, trajectory) -> None:
    _write_text(path, "".join(_ndjson_line(r) + "\n" for r in trajectory.records))


def write_ensemble_csv(path: Path, stats) -> None:
    names = stats.observable_names
    header = "time" + "".join(
        f",mean_{n},var_{n},stderr_{n}" for n in names
    )
    se = stats.stderr()
    lines = [header]
    for j, t in enumerate(stats.times):
        cells = [_fmt(t)]
        for i in range(len(names)):
            cells += [_fmt(stats.means[i, j]), _fmt(stats.variances[i, j]),
                      _fmt(se[i, j])]
        lines.append(",".join(cells))
    _write_text(path, "\n".join(lines) + "\n")


def write_histogram_csv(path: Path, edges, counts) -> None:
    lines = ["bin_left,bin_right,count"]
    for j in range(len(counts)):
        lines.append(f"{_fmt(edges[j])},{_fmt(edges[j + 1])},{int(counts[j])}")
    _write_text(path, "\n".join(lines) + "\n")


def write_columns_csv(path: Path, header, columns) -> None:
    lines = [",".join(header)]
    n = len(columns[0])
    for j in range(n):
        lines.append(",".join(_fmt(col[j]) for col in columns))
    _write_text(path, "\n".join(lines) + "\n")


def _sha256(path: Path) -> str:
    return "sha256:" + hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# oracle curves for oracle/compare modes

def _oracle_population_curve(cfg: RunConfig, times):
    """Population of the system versus time for a deterministic oracle."""
    spec = cfg.oracle
    kind = _require(spec, "kind", "config.oracle")
    tc = cfg.trajectory_config
    d = cfg.layout.system_dim
    if kind == "lindblad":
        ports = int(spec.get("ports", 1))
        rate = getattr(cfg.coupling, "rate", None)
        if rate is None:
            raise RunConfigError("config.oracle: lindblad oracle needs a rate-style coupling")
        a = np.diag(np.sqrt(np.arange(1, d, dtype=complex)), 1)
        init = np.zeros(d, dtype=complex)
        if tc.initial_system == "ground":
            init[0] = 1.0
        elif tc.initial_system == "excited":
            init[1] = 1.0
        else:
            init = np.asarray(tc.initial_system, dtype=complex)
            init /= np.linalg.norm(init)
        lspec = LindbladSpec(
            hamiltonian=dense_system_h(tc.system_h, d),
            collapse_ops=[np.sqrt(ports * rate) * a],
            rho0=np.outer(init, init.conj()),
            times=times,
        )
        num = np.diag(np.arange(d, dtype=float))
        return np.array([np.trace(r.matrix @ num).real for r in lindblad_solve(lspec)])
    if kind == "single_excitation":
        profile = build_coupling(cfg.coupling, cfg.layout.env_count, tc.dt)
        _, c = single_excitation_schrodinger(
            profile, tc.dt, float(times[-1]), times=times
        )
        return np.abs(c) ** 2
    if kind == "jc_pseudomode":
        if not isinstance(cfg.coupling, ExponentialCoupling):
            raise RunConfigError(
                "config.oracle: jc_pseudomode oracle needs an exponential coupling")
        levels = int(spec.get("cavity_levels", 2))
        lspec = jc_pseudomode(cfg.coupling.rate, cfg.coupling.memory_rate,
                              getattr(tc.system_h, "rabi", 0.0) or 0.0,
                              levels, times)
        return np.array([qubit_population(r, levels) for r in lindblad_solve(lspec)])
    if kind == "feedback_dde":
        if not isinstance(cfg.coupling, TwoPointFeedback):
            raise RunConfigError(
                "config.oracle: feedback_dde oracle needs a two-point coupling")
        delay = cfg.coupling.delay_steps * tc.dt
        dspec = DDESpec(rate=cfg.coupling.rate, phase=cfg.coupling.phase,
                        delay=delay, horizon=float(times[-1]),
                        step=min(delay / 10, tc.dt))
        _, c = feedback_dde(dspec, times=times)
        return np.abs(c) ** 2
    raise RunConfigError(f"config.oracle.kind: unknown kind {kind!r}")


def _mcwf_config(cfg: RunConfig) -> McwfConfig:
    tc = cfg.trajectory_config
    rate = getattr(cfg.coupling, "rate", None)
    if rate is None:
        raise RunConfigError("config.oracle: jump oracle needs a rate-style coupling")
    amplitude = phase = 0.0
    if isinstance(cfg.scheme, Homodyne):
        amplitude, phase = cfg.scheme.amplitude, cfg.scheme.phase
    return McwfConfig(
        system_dim=cfg.layout.system_dim, system_h=cfg.system_h, rate=rate,
        dt=tc.dt, n_steps=tc.n_steps, master_seed=tc.master_seed,
        initial=tc.initial_system, observables=tc.observables,
        amplitude=amplitude, phase=phase,
    )


# ---------------------------------------------------------------------------
# run modes

def run(cfg: RunConfig) -> int:
    """Execute the configured mode; returns the process exit code."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    started = _time.time()
    manifest = {
        "status": "running",
        "version": __version__,
        "seed": cfg.trajectory_config.master_seed,
        "config": cfg.echo(),
        "outputs": {},
    }
    _write_text(manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    written: list = []
    try:
        if cfg.mode == "spectrum":
            _run_spectrum(cfg, out, written)
        elif cfg.mode == "trajectory":
            _run_trajectories(cfg, out, written, cfg.trajectories)
        elif cfg.mode == "ensemble":
            _run_ensemble_mode(cfg, out, written)
        elif cfg.mode == "oracle":
            _run_oracle_mode(cfg, out, written)
        else:
            _run_compare_mode(cfg, out, written)
    except (RunConfigError,) as exc:
        _cleanup(written, manifest_path)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (MeasurementError, PropagatorError, OracleError, EngineError,
            CalibrationError, CapacityError, ValueError) as exc:
        _cleanup(written, manifest_path)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    manifest["status"] = "complete"
    manifest["wall_clock_s"] = round(_time.time() - started, 3)
    manifest["outputs"] = {p.name: _sha256(p) for p in written}
    _write_text(manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return 0


def _cleanup(written, manifest_path):
    for p in written:
        try:
            p.unlink()
        except OSError:
            pass
    try:
        manifest_path.unlink()
    except OSError:
        pass


def _run_spectrum(cfg, out, written):
    tc = cfg.trajectory_config
    profile = build_coupling(cfg.coupling, cfg.layout.env_count, tc.dt)
    spec = coupling_spectrum(profile, tc.dt)
    omegas = spec.wrapped_omegas()
    order = np.argsort(omegas)
    kappa_sq = np.abs(spec.kappas) ** 2
    header = ["omega", "kappa_sq"]
    cols = [omegas[order], kappa_sq[order]]
    if isinstance(cfg.coupling, ExponentialCoupling):
        # spectral_density = kappa_sq * L / (2 pi) is directly comparable to
        # the continuum Lorentzian reference
        dens = (spec.total_length / (2 * np.pi)) * kappa_sq
        ref = lorentzian_density(cfg.coupling.rate, cfg.coupling.memory_rate, omegas)
        header += ["spectral_density", "lorentzian_ref"]
        cols += [dens[order], ref[order]]
    path = out / "spectrum.csv"
    write_columns_csv(path, header, cols)
    written.append(path)


def _run_trajectories(cfg, out, written, count):
    for idx in range(count):
        traj = run_trajectory(cfg.trajectory_config, idx)
        path = out / f"trajectory_{idx:05d}.ndjson"
        write_trajectory_ndjson(path, traj)
        written.append(path)


def _run_ensemble_mode(cfg, out, written):
    stats = run_ensemble(cfg.trajectory_config, cfg.trajectories,
                         parallelism=cfg.threads, counting=cfg.counting)
    path = out / "ensemble.csv"
    write_ensemble_csv(path, stats)
    written.append(path)
    if stats.histogram_counts is not None:
        hpath = out / "histogram.csv"
        write_histogram_csv(hpath, stats.histogram_edges, stats.histogram_counts)
        written.append(hpath)
    _run_trajectories(cfg, out, written, cfg.sample_trajectories)


def _run_oracle_mode(cfg, out, written):
    kind = _require(cfg.oracle, "kind", "config.oracle")
    tc = cfg.trajectory_config
    times = tc.dt * np.arange(1, tc.n_steps + 1)
    if kind in ("mcwf_photodetection", "mcwf_homodyne"):
        stats = mcwf_ensemble(_mcwf_config(cfg), cfg.trajectories,
                              homodyne=(kind == "mcwf_homodyne"),
                              counting=cfg.counting)
        path = out / "oracle_ensemble.csv"
        write_ensemble_csv(path, stats)
        written.append(path)
        if stats.histogram_counts is not None:
            hpath = out / "oracle_histogram.csv"
            write_histogram_csv(hpath, stats.histogram_edges, stats.histogram_counts)
            written.append(hpath)
        return
    pop = _oracle_population_curve(cfg, times)
    path = out / "oracle.csv"
    write_columns_csv(path, ["time", "population"], [times, pop])
    written.append(path)


def _run_compare_mode(cfg, out, written):
    tc = cfg.trajectory_config
    if "n" not in tc.observables:
        raise RunConfigError(
            "config.observables: compare mode tracks the population observable 'n'")
    stats = run_ensemble(tc, cfg.trajectories, parallelism=cfg.threads,
                         counting=cfg.counting)
    i_n = tc.observables.index("n")
    mean_c = stats.means[i_n]
    se_c = stats.stderr()[i_n]
    kind = _require(cfg.oracle, "kind", "config.oracle")
    if kind in ("mcwf_photodetection", "mcwf_homodyne"):
        ostats = mcwf_ensemble(_mcwf_config(cfg), cfg.trajectories,
                               homodyne=(kind == "mcwf_homodyne"),
                               counting=cfg.counting)
        if "n" not in ostats.observable_names:
            raise RunConfigError("config.observables: oracle lacks 'n'")
        j = ostats.observable_names.index("n")
        mean_o = ostats.means[j]
        se_o = ostats.stderr()[j]
        z = (mean_c - mean_o) / np.sqrt(se_c**2 + se_o**2 + 1e-300)
        header = ["time", "collision_mean_n", "collision_stderr_n",
                  "oracle_mean_n", "oracle_stderr_n", "z_n"]
        cols = [stats.times, mean_c, se_c, mean_o, se_o, z]
    else:
        pop = _oracle_population_curve(cfg, stats.times)
        z = (mean_c - pop) / (se_c + 1e-300)
        header = ["time", "collision_mean_n", "collision_stderr_n",
                  "oracle_n", "z_n"]
        cols = [stats.times, mean_c, se_c, pop, z]
    path = out / "compare.csv"
    write_columns_csv(path, header, cols)
    written.append(path)


# ---------------------------------------------------------------------------
# argument handling

def _apply_override(raw: dict, dotted: str, text: str):
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise RunConfigError(f"override {dotted}: {p} is not a table")
    node[parts[-1]] = value


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="qcollide",
        description="Collision-model quantum trajectory simulator",
        epilog="Any config key can be overridden with --<dotted.key> <value>, "
               "e.g. --scheme.amplitude 5 --layout.lo_dim 64.",
    )
    parser.add_argument("config", help="path to a JSON run configuration")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--threads", type=int, help="ensemble parallelism degree")
    parser.add_argument("--out-dir", help="output directory")
    args, extra = parser.parse_known_args(argv)
    try:
        raw = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot load config: {exc}", file=sys.stderr)
        return 1
    try:
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.threads is not None:
            raw["threads"] = args.threads
        if args.out_dir is not None:
            raw["out_dir"] = args.out_dir
        it = iter(extra)
        for flag in it:
            if not flag.startswith("--"):
                raise RunConfigError(f"unexpected argument {flag!r}")
            try:
                value = next(it)
            except StopIteration:
                raise RunConfigError(f"flag {flag!r} is missing a value") from None
            _apply_override(raw, flag[2:], value)
        cfg = config_from_dict(raw)
    except RunConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
