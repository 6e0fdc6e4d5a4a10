"""Batch front end: ``lipbsoc {simulate,fit,validate,soc,sweep-kernels}``.

Configuration is an INI file with a ``[cell]`` section and one section per
command.  ``--set key=value`` (or ``--set section.key=value``) overrides a
single value.  Unknown sections or keys are rejected.  Each run echoes its
fully resolved configuration to ``config.ini`` in the output directory, and
every JSON report carries the SHA-256 of that echo.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .core import CellParams, Trace, soc_trajectory
from .estimate import EstimatorError, SocEkfConfig, soc_ekf_run
from .ident import (EkfConfig, IdentificationError, RbfEkfConfig, ekf_identify,
                    ekf_identify_rbf, fit_combined, fit_scheduled, initial_filter_template,
                    relative_p0, relaxation_tau_scan)
from .metrics import file_sha256, metrics_report
from .models import (CombinedParams, DomainError, FilterStateParams, RbfParams,
                     ScheduledParams, load_params, relaxation_time_constant_s, save_params,
                     simulate)
from .plant import (PlantConfig, ProfileSpec, SensorConfig, apply_sensor,
                    default_truth_params, gen_profile, plant_simulate)

log = logging.getLogger("lipbsoc")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INVALID = 4
EXIT_DOMAIN = 5

COMMANDS = ("simulate", "fit", "validate", "soc", "sweep-kernels")
FAMILIES = ("combined", "filter_state", "rbf", "scheduled")

_SENSOR = {"v_noise_sigma": 1e-3, "i_noise_sigma": 0.1, "i_bias": 0.0, "adc_bits": 10,
           "adc_fullscale_v": 5.0}
_RBF = {"rbf_layout": "soc,current,lowpass:auto", "rbf_mode": "weights",
        "rbf_passes": 3, "rbf_r_meas": 3e-6, "filter_params": ""}

#: every accepted key with its default; the default's type drives parsing
SCHEMA: dict[str, dict[str, object]] = {
    "cell": {"nominal_capacity_ah": 8.0, "eta_charge": 0.995, "v_high": 4.2, "v_low": 3.0,
             "peukert_exponent_n": 1.0, "peukert_capacity_cp": 8.0, "sample_period_s": 1.0},
    "simulate": {"profile": "pulse", "rate_c": 1.0, "pulse_s": 60.0, "rest_s": 300.0,
                 "soc_high": 1.0, "soc_low": 0.1, "charge_fraction": 0.5,
                 "mean_rate_c": 0.5, "cycle_s": 1370.0, "duration_s": 3600.0,
                 "truth_params": "", "noiseless": False, **_SENSOR},
    "fit": {"input": "", "family": "filter_state", "soc0": 1.0, "passes": 3, "p0": "relative",
            "r_meas": 1e-4, "cond_limit": 1e12, "bin_bounds_c": "1.5,3", "n_kernels": "50",
            **_RBF},
    "validate": {"params": "", "input": "", "soc0": 1.0, "family": ""},
    "soc": {"params": "", "input": "", "soc0": 1.0, "soc_sigma0": 0.3, "soc_truth": "",
            **_SENSOR},
    "sweep-kernels": {"input": "", "validation": "", "soc0": 1.0,
                      "n_kernels": "10,25,50,100", **_RBF},
}


class ConfigError(ValueError):
    pass


class FamilyMismatchError(ValueError):
    pass


def _parse(default, text: str, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


@dataclass
class RunConfig:
    command: str
    values: dict[str, dict[str, object]]
    seed: int = 0
    out: Path = Path("out")

    def __getitem__(self, key: str):
        return self.values[self.command][key]

    @property
    def cell(self) -> CellParams:
        c = self.values["cell"]
        return CellParams(nominal_capacity_ah=c["nominal_capacity_ah"], eta_charge=c["eta_charge"],
                          v_high=c["v_high"], v_low=c["v_low"],
                          peukert_exponent_n=c["peukert_exponent_n"],
                          peukert_capacity_cp=c["peukert_capacity_cp"],
                          sample_period_h=c["sample_period_s"] / 3600.0)

    def echo_text(self) -> str:
        """Canonical resolved config; the output directory is left out so that
        reruns elsewhere hash identically."""
        lines = ["[run]", f"command = {self.command}", f"seed = {self.seed}", ""]
        for section in ("cell", self.command):
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {_fmt(v)}" for k, v in self.values[section].items())
            lines.append("")
        return "\n".join(lines)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.echo_text().encode()).hexdigest()

    @classmethod
    def load(cls, command: str, path=None, overrides=(), seed: int = 0,
             out="out") -> "RunConfig":
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}")
        if seed < 0 or seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        values = {s: dict(d) for s, d in SCHEMA.items()}
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            with open(path, encoding="utf-8") as fh:
                try:
                    parser.read_file(fh)
                except configparser.Error as exc:
                    raise ConfigError(f"{path}: {exc}") from None
            for section in parser.sections():
                if section not in SCHEMA:
                    raise ConfigError(f"{path}: unknown section [{section}]")
                for key, text in parser.items(section):
                    _assign(values, section, key, text, f"{path} [{section}] {key}")
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set needs key=value, got {item!r}")
            key, text = item.split("=", 1)
            key = key.strip()
            if "." in key:
                section, key = key.split(".", 1)
            else:
                section = command if key in SCHEMA[command] else "cell"
            _assign(values, section, key, text, f"--set {item}")
        return cls(command, values, int(seed), Path(out))


def _assign(values, section, key, text, where):
    if section not in SCHEMA:
        raise ConfigError(f"{where}: unknown section {section!r}")
    if key not in SCHEMA[section]:
        raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
    values[section][key] = _parse(SCHEMA[section][key], text, where)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _paths(text: str) -> list[Path]:
    return [Path(p.strip()) for p in str(text).split(",") if p.strip()]


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from None


def _require(cfg: RunConfig, key: str) -> list[Path]:
    paths = _paths(cfg[key])
    if not paths:
        raise ConfigError(f"[{cfg.command}] {key} is required")
    return paths


def _sensor(cfg: RunConfig) -> SensorConfig:
    bits = cfg["adc_bits"]
    return SensorConfig(cfg["v_noise_sigma"], cfg["i_noise_sigma"], cfg["i_bias"],
                        bits if bits > 0 else None, cfg["adc_fullscale_v"])


def _start(cfg: RunConfig) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "config.ini").write_text(cfg.echo_text(), encoding="utf-8", newline="\n")
    (cfg.out / "config.sha256").write_text(cfg.sha256 + "\n", encoding="utf-8", newline="\n")
    return cfg.out


def _write_json(path: Path, doc: dict):
    path.write_text(json.dumps(doc, indent=2, default=_json_default) + "\n",
                    encoding="utf-8", newline="\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _read_traces(cfg: RunConfig, key: str, soc0: float) -> list[Trace]:
    return [io.read_trace(p, soc0=soc0) for p in _require(cfg, key)]


# ---------------------------------------------------------------------------
# simulate

def cmd_simulate(cfg: RunConfig) -> dict:
    """Generate a profile, run the plant and the sensor; writes ``trace.csv``
    (measured), ``truth.csv`` (exact voltage) and ``soc_truth.csv``."""
    out = _start(cfg)
    cell = cfg.cell
    profile_seed, sensor_seed = np.random.SeedSequence(cfg.seed).generate_state(2).tolist()
    spec = ProfileSpec(kind=cfg["profile"], rate_c=cfg["rate_c"], pulse_s=cfg["pulse_s"],
                       rest_s=cfg["rest_s"], soc_high=cfg["soc_high"], soc_low=cfg["soc_low"],
                       charge_fraction=cfg["charge_fraction"], mean_rate_c=cfg["mean_rate_c"],
                       cycle_s=cfg["cycle_s"], duration_s=cfg["duration_s"], seed=profile_seed)
    truth_model = load_params(cfg["truth_params"]) if cfg["truth_params"] \
        else default_truth_params()
    profile = gen_profile(spec, cell)
    truth, soc = plant_simulate(profile, PlantConfig(truth_model, cell, cfg.seed, spec.soc_high))
    measured = truth if cfg["noiseless"] else apply_sensor(truth, _sensor(cfg), sensor_seed)
    io.write_trace(measured, out / "trace.csv")
    io.write_trace(truth, out / "truth.csv")
    io.write_columns(out / "soc_truth.csv", ("time_s", "soc"), [truth.time_s, soc])
    summary = {"config_sha256": cfg.sha256, "n_samples": len(truth),
               "period_s": truth.period_s, "soc0": spec.soc_high,
               "final_soc": float(soc[-1]), "profile_seed": profile_seed,
               "sensor_seed": None if cfg["noiseless"] else sensor_seed}
    _write_json(out / "simulate_report.json", summary)
    return summary


# ---------------------------------------------------------------------------
# fit

def _ekf_config(cfg: RunConfig, template: FilterStateParams) -> EkfConfig:
    p0 = cfg["p0"]
    if str(p0).strip().lower() == "relative":
        p0 = relative_p0(template)
    else:
        p0 = _parse(0.0, str(p0), f"[{cfg.command}] p0")
    return EkfConfig(p0=p0, r_meas=cfg["r_meas"], passes=cfg["passes"])


def resolve_layout(cfg: RunConfig, traces: list[Trace], cell: CellParams) -> tuple[str, ...]:
    """Replace ``lowpass:auto`` with a relaxation time constant, taken from
    the filter-state model in ``filter_params`` or else scanned from ``traces``."""
    layout = tuple(t.strip() for t in str(cfg["rbf_layout"]).split(",") if t.strip())
    if "lowpass:auto" not in layout:
        return layout
    if cfg["filter_params"]:
        fsp = load_params(cfg["filter_params"])
        if isinstance(fsp, ScheduledParams):
            fsp = fsp.params[0]
        if not isinstance(fsp, FilterStateParams):
            raise FamilyMismatchError("filter_params must hold a filter_state model")
        tau = relaxation_time_constant_s(fsp, cell.with_period_s(traces[0].period_s))
    else:
        tau = relaxation_tau_scan(traces, cell)
    log.info("lowpass:auto resolved to %.3f s", tau)
    return tuple(f"lowpass:{tau!r}" if t == "lowpass:auto" else t for t in layout)


def _rbf_fit(traces, n: int, layout, cell, cfg: RunConfig):
    rcfg = RbfEkfConfig(r_meas=cfg["rbf_r_meas"], passes=cfg["rbf_passes"], mode=cfg["rbf_mode"])
    return ekf_identify_rbf(traces, n, cell, rcfg, cfg["soc0"], layout, seed=cfg.seed)


def cmd_fit(cfg: RunConfig) -> dict:
    """Identify one model family from trace CSVs; writes ``params.json``
    (``params_rbf_<N>.json`` per kernel count for rbf) and ``fit_report.json``."""
    family = cfg["family"]
    if family not in FAMILIES:
        raise ConfigError(f"family must be one of {FAMILIES}, got {family!r}")
    traces = _read_traces(cfg, "input", cfg["soc0"])
    out = _start(cfg)
    cell = cfg.cell
    report: dict = {"family": family, "config_sha256": cfg.sha256,
                    "inputs": [str(p) for p in _paths(cfg["input"])]}
    if family == "combined":
        model, lsq = fit_combined(traces, cell, cfg["soc0"])
        save_params(model, out / "params.json")
        report.update(lsq.as_dict())
    elif family == "filter_state":
        template = initial_filter_template(traces, cell)
        model, rep = ekf_identify(traces, template, cell, _ekf_config(cfg, template))
        save_params(model, out / "params.json")
        report.update(rep.as_dict())
    elif family == "scheduled":
        template = initial_filter_template(traces, cell)
        bounds = [cell.c_rate(float(b)) for b in str(cfg["bin_bounds_c"]).split(",") if b.strip()]
        model, reps = fit_scheduled(traces, template, cell, bounds + [math.inf],
                                    _ekf_config(cfg, template))
        save_params(model, out / "params.json")
        report.update(method="ekf", bins=[r.as_dict() for r in reps])
    else:
        layout = resolve_layout(cfg, traces, cell)
        kernels = _ints(cfg["n_kernels"])
        if not kernels:
            raise ConfigError("[fit] n_kernels is empty")
        report.update(method="ekf", input_layout=list(layout), networks=[])
        for n in kernels:
            model, rep = _rbf_fit(traces, n, layout, cell, cfg)
            save_params(model, out / f"params_rbf_{n}.json")
            if len(kernels) == 1:
                save_params(model, out / "params.json")
            report["networks"].append({"n_kernels": n, **rep.as_dict()})
    _write_json(out / "fit_report.json", report)
    return report


# ---------------------------------------------------------------------------
# validate

def predict(model, trace: Trace, cell: CellParams, soc0: float) -> np.ndarray:
    c_tr = cell.with_period_s(trace.period_s) if len(trace) > 1 else cell
    return simulate(model, trace, c_tr, soc0=soc0).voltage


def cmd_validate(cfg: RunConfig) -> dict:
    """Simulate a parameter file over a trace; writes ``metrics.json``,
    ``residual.csv`` (time_s, residual_v) and ``overlay.csv``
    (time_s, v_true, v_pred)."""
    params_path = _require(cfg, "params")[0]
    model = load_params(params_path)
    family = {CombinedParams: "combined", FilterStateParams: "filter_state",
              ScheduledParams: "scheduled", RbfParams: "rbf"}[type(model)]
    if cfg["family"] and cfg["family"] != family:
        raise FamilyMismatchError(f"parameter file holds {family}, config asks for {cfg['family']}")
    trace = _read_traces(cfg, "input", cfg["soc0"])[0]
    if not np.any(np.isfinite(trace.voltage_v)):
        raise FamilyMismatchError("validation trace has no measured voltage")
    out = _start(cfg)
    y = predict(model, trace, cfg.cell, cfg["soc0"])
    resid = trace.voltage_v - y
    io.write_columns(out / "residual.csv", ("time_s", "residual_v"), [trace.time_s, resid])
    io.write_columns(out / "overlay.csv", ("time_s", "v_true", "v_pred"),
                     [trace.time_s, trace.voltage_v, y])
    rep = metrics_report(resid, trace.current_a, cfg.cell, family, file_sha256(params_path))
    rep.config_sha256 = cfg.sha256
    doc = rep.as_dict()
    _write_json(out / "metrics.json", doc)
    return doc


# ---------------------------------------------------------------------------
# soc

def cmd_soc(cfg: RunConfig) -> dict:
    """Closed-loop SOC estimation; writes ``soc_estimate.csv`` and
    ``soc_summary.json``."""
    model = load_params(_require(cfg, "params")[0])
    if not isinstance(model, (FilterStateParams, ScheduledParams)):
        raise FamilyMismatchError("SOC estimation needs a filter_state or scheduled model")
    trace = _read_traces(cfg, "input", cfg["soc0"])[0]
    soc_true = None
    if cfg["soc_truth"]:
        cols = io.read_columns(cfg["soc_truth"])
        soc_true = cols["soc"]
        if soc_true.size != len(trace):
            raise FamilyMismatchError("soc_truth length differs from the trace")
    out = _start(cfg)
    cell = cfg.cell.with_period_s(trace.period_s) if len(trace) > 1 else cfg.cell
    ekf = SocEkfConfig.for_sensor(_sensor(cfg), model, cell, cfg["soc0"], cfg["soc_sigma0"])
    run = soc_ekf_run(trace, model, cell, ekf, soc_true)
    io.write_columns(out / "soc_estimate.csv", ("time_s", "soc", "sigma", "innovation_v"),
                     [run.time_s, run.soc, run.sigma, run.innovation_v])
    open_loop = soc_trajectory(trace, cfg["soc0"], cell)
    summary = dict(run.summary, config_sha256=cfg.sha256,
                   open_loop_final_soc=float(open_loop[-1]))
    if soc_true is not None:
        summary["open_loop_final_soc_error"] = float(open_loop[-1] - soc_true[-1])
    _write_json(out / "soc_summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# sweep-kernels

def cmd_sweep_kernels(cfg: RunConfig) -> dict:
    """Fit and validate an RBF network per kernel count on fixed data;
    writes ``sweep.csv`` (n_kernels, rms_mv) and ``params_rbf_<N>.json``."""
    traces = _read_traces(cfg, "input", cfg["soc0"])
    val_key = "validation" if cfg["validation"] else "input"
    val = _read_traces(cfg, val_key, cfg["soc0"])[0]
    kernels = _ints(cfg["n_kernels"])
    if not kernels:
        raise ConfigError("[sweep-kernels] n_kernels is empty")
    out = _start(cfg)
    cell = cfg.cell
    layout = resolve_layout(cfg, traces, cell)
    rows = []
    for n in kernels:
        model, rep = _rbf_fit(traces, n, layout, cell, cfg)
        save_params(model, out / f"params_rbf_{n}.json")
        resid = val.voltage_v - predict(model, val, cell, cfg["soc0"])
        rms_mv = float(np.sqrt(np.nanmean(resid ** 2))) * 1e3
        rows.append({"n_kernels": n, "rms_mv": rms_mv,
                     "train_innovation_rms_mv": rep.final_innovation_rms * 1e3})
        log.info("N=%d rms %.4f mV", n, rms_mv)
    text = "n_kernels,rms_mv\n" + "".join(f"{r['n_kernels']},{r['rms_mv']!r}\n" for r in rows)
    (out / "sweep.csv").write_text(text, encoding="utf-8", newline="\n")
    doc = {"config_sha256": cfg.sha256, "input_layout": list(layout), "rows": rows}
    _write_json(out / "sweep_report.json", doc)
    return doc


HANDLERS = {"simulate": cmd_simulate, "fit": cmd_fit, "validate": cmd_validate,
            "soc": cmd_soc, "sweep-kernels": cmd_sweep_kernels}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (IdentificationError, EstimatorError)):
        return exc.exit_code
    if isinstance(exc, DomainError):
        return EXIT_DOMAIN
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (ValueError, TypeError, KeyError)):
        return EXIT_INVALID
    raise exc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lipbsoc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HANDLERS[name].__doc__.split(";")[0].strip())
        sp.add_argument("--config", type=Path, help="INI config file")
        sp.add_argument("--seed", type=int, default=0, help="unsigned 64-bit seed")
        sp.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config value")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.command, args.config, args.overrides, args.seed, args.out)
        HANDLERS[args.command](cfg)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = exit_code_for(exc)
        print(f"lipbsoc {args.command}: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK
