"""
Command-line entry point.

::

    vibroimpact reduce   [--config run.json] [--set key=value ...] [--output DIR]
    vibroimpact sweep    [--rom rom.zip] ...
    vibroimpact converge [--rom rom.zip] ...
    vibroimpact analyze  SERIES [SERIES ...] ...
    vibroimpact update   ...

Every command writes ``<output>/<command>/manifest.json`` with the
configuration echo, the tool version and SHA-256 hashes of inputs and
outputs. The output root is ``--output``, else ``$VIBROIMPACT_OUTPUT``,
else ``outputs.directory`` of the configuration.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .contact import ContactConfig, ContactNonConvergence
from .harness import (
    StudyError,
    SweepPlan,
    convergence_modes_study,
    convergence_time_study,
    stepped_sine,
)
from .integrator import Excitation, IntegrationError, simulate
from .modal import ModalError, damping_matrix, update_parameters
from .model import (
    ElasticLayer,
    ModelError,
    apply_point_masses,
    attach_elastic_layers,
    build_twin_beam_model,
    load_fe_matrices,
)
from .postproc import (
    SeriesError,
    TimeSeries,
    contact_activity,
    demodulate_fundamental,
    per_period_amplitudes,
    period_peaks,
    rms,
    wavelet_spectrogram,
)
from .presets import elastic_root_model
from .rom import (
    ReductionError,
    boundary_transform,
    load_reduced,
    macneal_reduce,
    save_reduced,
    static_check,
)

log = logging.getLogger("vibroimpact")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
OUTPUT_ENV = "VIBROIMPACT_OUTPUT"
ROM_FILE = "rom.zip"


class NumericalFailure(RuntimeError):
    pass


# -- helpers -------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def output_root(cfg: RunConfig, override=None) -> Path:
    if override:
        return Path(override)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    return cfg.path(cfg["outputs"]["directory"])


def write_manifest(out: Path, command: str, cfg: RunConfig, inputs: dict, extra=None) -> dict:
    """Hash every file under ``out`` (except the manifest) and write the manifest."""
    outputs = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p != out / "manifest.json":
            outputs[p.relative_to(out).as_posix()] = sha256_file(p)
    manifest = {
        "command": command,
        "tool": "vibroimpact",
        "version": __version__,
        "config": cfg.data,
        "inputs": {k: {"path": str(v), "sha256": sha256_file(v)} for k, v in inputs.items()},
        "outputs": outputs,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def _csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x
                        for x in row])


def _gnuplot(path: Path, title: str, body: list[str], enabled: bool = True):
    if not enabled:
        return
    head = [f"# {title}", "set datafile separator ','", "set key autotitle columnhead",
            "set grid"]
    path.write_text("\n".join(head + body) + "\n")


def contact_config(cfg: RunConfig) -> ContactConfig:
    c = cfg["contact"]
    return ContactConfig(mu=float(c["mu"]), tol_rel=float(c["tol_rel"]),
                         max_iter=int(c["max_iter"]), rho=float(c["rho"]))


def build_fe_model(cfg: RunConfig):
    """FE model from the configured source, with point masses and spring layers."""
    m = cfg["model"]
    if m["source"] == "twin_beam":
        model = build_twin_beam_model(cfg.twin_beam_spec())
    else:
        f = m["files"]
        model = load_fe_matrices(cfg.path(f["M"]), cfg.path(f["K"]), cfg.path(f["metadata"]))
    if m["point_masses"]:
        model = apply_point_masses(model, [(int(n), float(w)) for n, w in m["point_masses"]])
    if m["elastic_layers"]:
        layers = []
        for i, d in enumerate(m["elastic_layers"]):
            try:
                layers.append(ElasticLayer(
                    pairs=tuple((int(a), None if b is None else int(b)) for a, b in d["pairs"]),
                    k_n=float(d["k_n"]), k_t=float(d["k_t"]),
                    normal=tuple(d.get("normal", (0.0, 0.0, 1.0)))))
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"model.elastic_layers[{i}]: {exc}") from None
        model = attach_elastic_layers(model, layers)
    return model


def finish_rom(rom, cfg: RunConfig):
    """Apply configured damping and length scale to a freshly reduced model."""
    d = cfg["damping"]
    overrides = {int(k): float(v) for k, v in d["overrides"].items()}
    D = np.diag(damping_matrix(rom.omegas, d["ratios"], overrides))
    return replace(rom.with_damping(D), length_scale=cfg.length_scale)


def _check_n_modes(tm, n_modes: int):
    limit = tm.K.shape[0] - tm.n_boundary
    if not 1 <= n_modes <= limit:
        raise ConfigError(f"reduction.n_modes = {n_modes} exceeds the {limit} interior DOFs "
                          f"of the model; choose a value between 1 and {limit}")


def _rom_path(args, root: Path) -> Path:
    p = Path(args.rom) if args.rom else root / "reduce" / ROM_FILE
    if not p.exists():
        raise ConfigError(f"reduced model {p} not found; run 'vibroimpact reduce' first "
                          "or pass --rom")
    return p


def _pool(workers: int):
    return ProcessPoolExecutor(max_workers=workers) if workers > 1 else None


# -- reduce --------------------------------------------------------------------------


def cmd_reduce(cfg: RunConfig, args) -> dict:
    out = output_root(cfg, args.output) / "reduce"
    out.mkdir(parents=True, exist_ok=True)
    model = build_fe_model(cfg)
    tm = boundary_transform(model)
    n_modes = cfg["reduction"]["n_modes"]
    _check_n_modes(tm, n_modes)
    rom = finish_rom(macneal_reduce(tm, n_modes), cfg)
    check = static_check(tm, rom)
    rom_hash = save_reduced(rom, out / ROM_FILE)
    f = rom.frequencies
    ref = f[min(1, f.size - 1)]
    _csv(out / "frequencies.csv", ["mode", "frequency_hz", "omega_rad_s", "ratio_to_mode2",
                                   "damping_ratio"],
         [[i + 1, f[i], rom.omegas[i], f[i] / ref, rom.D[i] / (2 * rom.omegas[i])]
          for i in range(f.size)])
    inputs = {}
    if cfg["model"]["source"] == "files":
        inputs = {k: cfg.path(v) for k, v in cfg["model"]["files"].items()}
    report = {
        "n_dofs": int(model.n_dofs),
        "n_modes": int(n_modes),
        "n_pairs": int(rom.n_pairs),
        "frequencies_hz": f.tolist(),
        "fundamental_pair_ratio": float(f[1] / f[0]) if f.size > 1 else None,
        "static_check": check,
        "rom_sha256": rom_hash,
        "load_report": model.load_report,
    }
    log.info("reduced %d DOFs to %d modes + %d boundary coordinates; f2/f1 = %.4f",
             model.n_dofs, n_modes, rom.n_boundary, report["fundamental_pair_ratio"] or 0)
    write_manifest(out, "reduce", cfg, inputs, {"reduction": report})
    return report


# -- sweep ---------------------------------------------------------------------------


def _sweep_task(rom_path: str, cfg_data: dict, base_dir: str, index: int, out_dir: str) -> dict:
    cfg = RunConfig(cfg_data, Path(base_dir))
    rom = load_reduced(rom_path)
    test = cfg["excitation"]["tests"][index]
    e = cfg["excitation"]
    L = cfg.length_scale
    plan = SweepPlan.from_grid(
        cfg.frequency_grid(), test["direction"], level=float(test["level"]) * L,
        wait_periods=int(e["wait_periods"]), record_periods=int(e["record_periods"]),
        clearance=float(test["clearance"]) * L,
        steps_per_period=int(cfg["integrator"]["steps_per_period"]),
        stride=int(cfg["outputs"]["stride"]), max_extensions=int(e["max_extensions"]),
        settle_tol=float(e["settle_tol"]), on_error=e["on_error"], start=e["start"],
    )
    omega_ref = e["omega_ref"]
    res = stepped_sine(rom, contact_config(cfg), plan, omega_ref=omega_ref,
                       keep_series=bool(cfg["outputs"]["series"]),
                       model_hash=sha256_file(rom_path))
    out = Path(out_dir)
    res.save(out, series=bool(cfg["outputs"]["series"]))
    chans = sorted(res.steps[0].rms) if res.steps else []
    _sweep_plots(out, chans, cfg["outputs"]["plot_scripts"])
    inv = res.invariants
    return {"index": index, "directory": out.name, "level": test["level"],
            "direction": test["direction"], "clearance": test["clearance"],
            "omega_ref": res.omega_ref, "invariants": inv,
            "failed_steps": [s.ratio for s in res.steps if s.error],
            "unsettled_steps": [s.ratio for s in res.steps if not s.settled and not s.error]}


def _sweep_plots(out: Path, chans, enabled):
    if not enabled or not chans:
        return
    cols = ["omega_ratio", "omega"] + [f"rms_{c}" for c in chans]
    body = ["set xlabel 'Omega / omega_ref'", "set ylabel 'RMS velocity (m/s)'",
            "plot " + ", ".join(f"'summary.csv' using 1:{cols.index(f'rms_{c}') + 1} "
                                f"with linespoints title '{c}'" for c in chans)]
    _gnuplot(out / "rms_vs_frequency.gp", "RMS velocity against excitation frequency", body)
    k = len(cols)
    lines = []
    for j, c in enumerate(chans):
        base = k + 3 * j + 1
        lines += [f"'summary.csv' using 1:{base} with lines title 'min {c}'",
                  f"'summary.csv' using 1:{base + 1} with lines title 'max {c}'",
                  f"'summary.csv' using 1:{base + 2} with lines title 'mean {c}'"]
    _gnuplot(out / "amplitude_vs_frequency.gp",
             "per-period min/max/mean velocity amplitude against frequency",
             ["set xlabel 'Omega / omega_ref'", "set ylabel 'zero-to-peak velocity (m/s)'",
              "plot " + ", ".join(lines)])


def cmd_sweep(cfg: RunConfig, args) -> dict:
    root = output_root(cfg, args.output)
    rom_path = _rom_path(args, root)
    load_reduced(rom_path)  # fail early on a bad archive
    out = root / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    tests = cfg["excitation"]["tests"]
    if not tests:
        raise ConfigError("excitation.tests is empty")
    dirs = [str(out / f"test_{i:02d}_{t['direction']}_{t['level']:g}") for i, t in
            enumerate(tests)]
    task = partial(_sweep_task, str(rom_path), cfg.data, str(cfg.base_dir))
    pool = _pool(min(cfg["workers"], len(tests)))
    if pool is None:
        results = [task(i, d) for i, d in enumerate(dirs)]
    else:
        with pool:
            results = list(pool.map(task, range(len(tests)), dirs))
    for r in results:
        log.info("test %d (%s, level %g): worst gap %.3e m, min lambda_n %.3e",
                 r["index"], r["direction"], r["level"], r["invariants"].get("min_gap", 0),
                 r["invariants"].get("min_lambda_n", 0))
    write_manifest(out, "sweep", cfg, {"rom": rom_path}, {"tests": results})
    return {"tests": results}


# -- converge ------------------------------------------------------------------------


def _time_study(rom_path: str, cfg_data: dict, base_dir: str):
    cfg = RunConfig(cfg_data, Path(base_dir))
    c = cfg["convergence"]
    L = cfg.length_scale
    rom = load_reduced(rom_path).with_clearance(float(c["clearance"]) * L)
    config = contact_config(cfg)
    omega_ref = cfg["excitation"]["omega_ref"] or float(rom.omegas[min(1, rom.n_modes - 1)])
    exc = Excitation(float(c["omega_ratio"]) * omega_ref, float(c["level"]) * L)
    spp = int(cfg["integrator"]["steps_per_period"])
    dt = exc.period / spp
    state = None
    if c["settle_periods"]:
        state = simulate(rom, config, exc, None, dt, None, n_steps=int(c["settle_periods"]) * spp,
                         stride=spp).final_state
        state = replace(state, t=0.0, j=0)
    return convergence_time_study(rom, config, exc, c["steps_per_period"],
                                  int(c["horizon_periods"]), state0=state,
                                  state0_dt=dt if state is not None else None)


def _modes_study(cfg_data: dict, base_dir: str):
    cfg = RunConfig(cfg_data, Path(base_dir))
    c = cfg["convergence"]
    L = cfg.length_scale
    tm = boundary_transform(build_fe_model(cfg))
    for n in c["n_modes"]:
        _check_n_modes(tm, int(n))

    def reduce(n):
        return finish_rom(macneal_reduce(tm, n), cfg).with_clearance(float(c["clearance"]) * L)

    omega_ref = cfg["excitation"]["omega_ref"]
    if omega_ref is None:
        omega_ref = float(macneal_reduce(tm, 2).omegas[1])
    exc = Excitation(float(c["omega_ratio"]) * omega_ref, float(c["level"]) * L)
    spp = int(c["modes_steps_per_period"])
    return convergence_modes_study(reduce, contact_config(cfg), exc, c["n_modes"],
                                   horizon_periods=int(c["modes_record_periods"]),
                                   settle_periods=int(c["settle_periods"]),
                                   steps_per_period=spp, stride=max(spp // 50, 1))


def _table_plot(out: Path, stem: str, xlabel: str, enabled: bool):
    _gnuplot(out / f"{stem}.gp", f"{stem.replace('_', ' ')}", [
        "set logscale y", f"set xlabel '{xlabel}'",
        f"plot '{stem}.csv' using 1:2 with linespoints title 'eps_rms', "
        f"'{stem}.csv' using 1:4 with linespoints title 'relative RMS change'"], enabled)


def cmd_converge(cfg: RunConfig, args) -> dict:
    root = output_root(cfg, args.output)
    rom_path = _rom_path(args, root)
    out = root / "converge"
    out.mkdir(parents=True, exist_ok=True)
    c = cfg["convergence"]
    do_modes = bool(c["n_modes"])
    pool = _pool(min(cfg["workers"], 2 if do_modes else 1))
    t_args = (str(rom_path), cfg.data, str(cfg.base_dir))
    m_args = (cfg.data, str(cfg.base_dir))
    if pool is None:
        time_tab = _time_study(*t_args)
        modes_tab = _modes_study(*m_args) if do_modes else None
    else:
        with pool:
            ft = pool.submit(_time_study, *t_args)
            fm = pool.submit(_modes_study, *m_args) if do_modes else None
            time_tab = ft.result()
            modes_tab = fm.result() if fm else None
    plots = cfg["outputs"]["plot_scripts"]
    report = {"time": _table_report(time_tab)}
    time_tab.to_csv(out / "time_step_table.csv")
    _table_plot(out, "time_step_table", "steps per period", plots)
    if modes_tab is not None:
        modes_tab.to_csv(out / "modes_table.csv")
        _table_plot(out, "modes_table", "retained modes", plots)
        report["modes"] = _table_report(modes_tab)
    write_manifest(out, "converge", cfg, {"rom": rom_path}, {"studies": report})
    return report


def _table_report(tab) -> dict:
    i = tab.threshold_index(0.01)
    return {"parameter": tab.parameter, "values": list(tab.values), "channel": tab.channel,
            "eps_rms": [None if np.isnan(e) else float(e) for e in tab.eps],
            "rms_change": [None if np.isnan(e) else float(e) for e in tab.rms_change],
            "threshold_1pct": None if i is None else tab.values[i],
            "failures": {str(k): v for k, v in tab.failures.items()}}


# -- analyze -------------------------------------------------------------------------


def analyze_series(series: TimeSeries, channels, freq_range, n_freqs: int, out: Path,
                   stem: str, plots: bool = True) -> dict:
    """Write RMS/extrema, spectrogram and activity files for one series."""
    if "omega" not in series.meta:
        raise SeriesError(f"{stem}: series metadata lacks 'omega'")
    omega = float(series.meta["omega"])
    f0 = omega / (2 * np.pi)
    report = {"omega": omega, "channels": {}}
    for ch in channels:
        x = series[ch]
        a_min, a_max, a_mean = per_period_amplitudes(series, ch)
        amp, phase = demodulate_fundamental(series, ch)
        report["channels"][ch] = {"rms": rms(x), "amp_min": a_min, "amp_max": a_max,
                                  "amp_mean": a_mean, "fundamental_amplitude": amp,
                                  "fundamental_phase": phase}
        peaks = period_peaks(series, ch)
        _csv(out / f"{stem}_{ch}_period_peaks.csv", ["period", "peak"], enumerate(peaks))
        spec = wavelet_spectrogram(series, ch, (freq_range[0] * f0, freq_range[1] * f0), n_freqs)
        spec.save(out / f"{stem}_{ch}_spectrogram")
        if plots:
            _gnuplot(out / f"{stem}_{ch}_trace.gp", f"{ch} time history", [
                "set xlabel 't (s)'", "set ylabel '{}'".format(ch),
                f"plot '{series.meta.get('source', stem + '.csv')}' using 't':'{ch}' "
                "with lines"])
            _gnuplot(out / f"{stem}_{ch}_spectrogram.gp", f"{ch} wavelet spectrogram", [
                "unset key", "set datafile separator ','", "set view map",
                "set ylabel 'frequency bin'", "set xlabel 'sample'",
                f"plot '{stem}_{ch}_spectrogram_map.csv' matrix with image"])
    if series.gap_channels:
        act = contact_activity(series)
        report["contact"] = {"fraction": act.fraction, "impacts": act.impacts,
                             "clusters": act.n_clusters,
                             "impacts_per_cluster": act.impacts_per_cluster.tolist()}
        spp = 2 * np.pi / omega / series.dt
        phase = np.mod(np.arange(len(series)), spp) / spp
        period = np.floor(np.arange(len(series)) / spp + 1e-9).astype(int)
        idx = np.flatnonzero(act.active)
        _csv(out / f"{stem}_activity.csv", ["t", "period", "phase"],
             [[series.t[i], period[i], phase[i]] for i in idx])
        _gnuplot(out / f"{stem}_activity.gp", "contact activity raster", [
            "set xlabel 'phase within excitation period'", "set ylabel 'period'",
            f"plot '{stem}_activity.csv' using 3:2 with dots notitle"], plots)
    return report


def cmd_analyze(cfg: RunConfig, args) -> dict:
    if not args.series:
        raise ConfigError("analyze needs at least one series path")
    out = output_root(cfg, args.output) / "analyze"
    out.mkdir(parents=True, exist_ok=True)
    a = cfg["analysis"]
    inputs, report = {}, {}
    for k, p in enumerate(args.series):
        p = Path(p)
        csv_path = p.with_suffix(".csv")
        if not csv_path.exists():
            raise ConfigError(f"series file {csv_path} not found")
        series = TimeSeries.load(p)
        series.meta["source"] = str(csv_path)
        stem = f"{k:02d}_{p.stem}"
        inputs[stem] = csv_path
        if p.with_suffix(".json").exists():
            inputs[stem + "_meta"] = p.with_suffix(".json")
        report[stem] = analyze_series(series, a["channels"], a["freq_range"], int(a["n_freqs"]),
                                      out, stem, cfg["outputs"]["plot_scripts"])
    (out / "analysis.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    write_manifest(out, "analyze", cfg, inputs, {"wavelet": {"family": "morlet", "w0": 6.0,
                                                             "normalization": "amplitude",
                                                             "n_freqs": int(a["n_freqs"]),
                                                             "freq_range_over_f0": a["freq_range"]}})
    return report


# -- update --------------------------------------------------------------------------


def cmd_update(cfg: RunConfig, args) -> dict:
    u = cfg["updating"]
    if u["model"] != "elastic_root":
        raise ConfigError("updating.model must be 'elastic_root'")
    if not u["targets"]:
        raise ConfigError("updating.targets must list target frequencies in Hz")
    out = output_root(cfg, args.output) / "update"
    out.mkdir(parents=True, exist_ok=True)
    builder = partial(elastic_root_model, spec=cfg.twin_beam_spec())
    res = update_parameters(builder, u["params0"], u["bounds"], u["targets"], u["weights"],
                            n_modes=u["n_modes"], seed=cfg["seed"],
                            population=int(u["population"]), generations=int(u["generations"]),
                            workers=cfg["workers"])
    report = {"params": res.params.tolist(), "objective": res.objective,
              "objective0": res.objective0, "frequencies_hz": res.frequencies.tolist(),
              "targets_hz": list(map(float, u["targets"])),
              "residuals": res.residuals.tolist(), "seed": res.seed, "nfev": res.nfev}
    (out / "result.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    write_manifest(out, "update", cfg, {}, {"updating": report})
    return report


# -- entry point ---------------------------------------------------------------------

COMMANDS = {"reduce": cmd_reduce, "sweep": cmd_sweep, "converge": cmd_converge,
            "analyze": cmd_analyze, "update": cmd_update}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="run configuration (JSON)")
    common.add_argument("-s", "--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a configuration key (JSON value)")
    common.add_argument("-o", "--output", help=f"output root (overrides ${OUTPUT_ENV})")
    common.add_argument("-v", "--verbose", action="count", default=0)
    p = argparse.ArgumentParser(prog="vibroimpact", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("reduce", parents=[common], help="build and reduce the FE model")
    for name, text in (("sweep", "run the configured stepped-sine tests"),
                       ("converge", "time-step and mode-count convergence studies")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--rom", help=f"reduced-model archive (default <output>/reduce/{ROM_FILE})")
    sp = sub.add_parser("analyze", parents=[common], help="post-process saved time series")
    sp.add_argument("series", nargs="*", help="series path (.csv with .json sidecar)")
    sub.add_parser("update", parents=[common], help="tune model parameters to frequencies")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, ModelError, SeriesError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"vibroimpact {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ReductionError, ModalError, ContactNonConvergence, IntegrationError, StudyError,
            NumericalFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"vibroimpact {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
