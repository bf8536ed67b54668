import os
import io
import sys
import math
import argparse
import logging
import concurrent.futures as cf
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from spectral_model import (
    DEFAULT_TAU, EMPIRICAL, PARAMETRIC, ModelConfig, beta_law, identity_spectrum,
    point_mass_law, spectrum_from_file, two_atom_spectrum, validate
)
from selfconsistent import DEFAULT_MAX_ITER, DEFAULT_TOL, density, save_density
from edge import RegularityError, describe_edge, save_edge_report
from tracy_widom import build_table, ks_distance, ks_two_sample, load_table, save_table
from ensemble import ENSEMBLES, omega_frequency, run_trial, sample_radial, trial_rng
from locallaw import (
    DEFAULT_C_LEFT_FRACTION, SpectralDomain, compare_ensembles_greenfn, local_law_study
)
from utils.run_utils import (
    ComputationError, PersistenceError, append_frame_to_csv, default_output_dir, default_threads,
    prepare_output_folder, save_frame_to_csv, save_json, to_json_text
)

KS_THRESHOLD = 0.05
EXCLUSION_THRESHOLD = 0.05
SQRT_EXPONENT_TOLERANCE = 0.05
CHECKS = ("edge", "tw", "locallaw", "omega", "comparison")

# Recognised config keys and their defaults; an empty default means "unset".
DEFAULTS: Dict[str, str] = {
    "model.p": "400",
    "model.n": "400",
    "model.tau": str(DEFAULT_TAU),
    "radial.kind": PARAMETRIC,
    "radial.l": "1.0",
    "radial.d": "0.0",
    "radial.b": "1.0",
    "radial.masses": "",
    "spectrum.kind": "identity",
    "spectrum.high": "2.0",
    "spectrum.low": "1.0",
    "spectrum.weight": "0.5",
    "spectrum.file": "",
    "solver.tol": str(DEFAULT_TOL),
    "solver.max_iter": str(DEFAULT_MAX_ITER),
    "omega.C": "1.0",
    "omega.epsilon": "0.05",
    "locallaw.c_left": "",
    "locallaw.C_right": "1.0",
    "locallaw.epsilon_e": "0.1",
    "locallaw.seeds": "50",
    "omega.ns": "500,2000,8000",
    "omega.seeds": "100",
    "comparison.pairs": "500",
    "experiment.trials": "100",
    "experiment.k_top": "1",
    "experiment.seed": "0",
    "experiment.ensembles": ",".join(ENSEMBLES),
    "experiment.checks": "edge,tw",
    "experiment.outputs": "",
}


class ConfigError(ValueError):
    """Exception for unknown, missing or malformed configuration keys."""

    def __init__(self, message: str, keys: Sequence[str] = ()):
        super().__init__(message)
        self.keys = list(keys)


@dataclass(frozen=True)
class ExperimentSpec:
    model: ModelConfig
    trials: int = 100
    k_top: int = 1
    seed_base: int = 0
    ensembles: Tuple[str, ...] = ENSEMBLES
    outputs: str = "output"
    checks: Tuple[str, ...] = ("edge", "tw")
    solver_tol: float = DEFAULT_TOL
    solver_max_iter: int = DEFAULT_MAX_ITER
    omega_C: float = 1.0
    omega_epsilon: float = 0.05
    c_left: Optional[float] = None
    C_right: float = 1.0
    epsilon_e: float = 0.1
    locallaw_seeds: int = 50
    omega_ns: Tuple[int, ...] = (500, 2000, 8000)
    omega_seeds: int = 100
    comparison_pairs: int = 500


@dataclass
class CampaignSummary:
    n_trials: int
    n_excluded: int
    ks_elliptical: float
    ks_gaussian: float
    ks_two_sample: float
    mean_stat: float
    var_stat: float
    mean_stat_gaussian: float
    var_stat_gaussian: float
    gamma0: float
    lambda_plus_limiting: float
    omega_pass_rate: float
    flagged: bool = False
    seed_base: int = 0
    checks: Dict[str, bool] = field(default_factory=dict)
    thresholds: Dict[str, float] = field(default_factory=lambda: {
        "ks": KS_THRESHOLD, "exclusion_rate": EXCLUSION_THRESHOLD})

    @property
    def passed(self) -> bool:
        """True when the campaign is not flagged and every requested check passed."""
        return not self.flagged and all(self.checks.values())

    def to_dict(self) -> Dict[str, object]:
        out = asdict(self)
        out["passed"] = self.passed
        return out


def parse_config_text(text: str) -> Dict[str, str]:
    """
    Parse flat dotted key=value text.

    Raises:
        ConfigError: Listing every unknown key or key without a value
    """
    values = dotenv_values(stream=io.StringIO(text), interpolate=False)
    unknown = sorted(k for k in values if k not in DEFAULTS)
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}", unknown)
    missing = sorted(k for k, v in values.items() if v is None)
    if missing:
        raise ConfigError(f"Config keys without a value: {', '.join(missing)}", missing)
    return dict(values)


def dump_config(values: Dict[str, str]) -> str:
    """Serialise config values as sorted key=value lines."""
    return "".join(f"{key}={values[key]}\n" for key in sorted(values))


def _number(values: Dict[str, str], key: str, kind=float):
    raw = values[key]
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key} must be {kind.__name__}, got: {raw}", [key])


def _list(values: Dict[str, str], key: str, allowed: Sequence[str]) -> Tuple[str, ...]:
    items = tuple(item.strip() for item in values[key].split(",") if item.strip())
    bad = [item for item in items if item not in allowed]
    if bad:
        raise ConfigError(f"{key} has unknown entries: {', '.join(bad)}", [key])
    return items


def build_model(values: Dict[str, str]) -> ModelConfig:
    merged = {**DEFAULTS, **values}
    p = _number(merged, "model.p", int)
    n = _number(merged, "model.n", int)

    kind = merged["spectrum.kind"]
    if kind == "identity":
        spectrum = identity_spectrum(p)
    elif kind == "two_atom":
        spectrum = two_atom_spectrum(p, _number(merged, "spectrum.high"), _number(merged, "spectrum.low"),
                                     _number(merged, "spectrum.weight"))
    elif kind == "file":
        if not merged["spectrum.file"]:
            raise ConfigError("spectrum.kind=file needs spectrum.file", ["spectrum.file"])
        spectrum = spectrum_from_file(merged["spectrum.file"], p)
    else:
        raise ConfigError(f"spectrum.kind must be identity, two_atom or file, got: {kind}", ["spectrum.kind"])

    radial_kind = merged["radial.kind"]
    if radial_kind == PARAMETRIC:
        radial = beta_law(_number(merged, "radial.l"), _number(merged, "radial.d"), _number(merged, "radial.b"))
    elif radial_kind == EMPIRICAL:
        if not merged["radial.masses"]:
            raise ConfigError("radial.kind=point_mass needs radial.masses", ["radial.masses"])
        try:
            masses = [float(m) for m in merged["radial.masses"].split(",")]
        except ValueError:
            raise ConfigError("radial.masses must be comma-separated numbers", ["radial.masses"])
        radial = point_mass_law(masses, l=max(masses), d=_number(merged, "radial.d"))
    else:
        raise ConfigError(f"radial.kind must be {PARAMETRIC} or {EMPIRICAL}, got: {radial_kind}", ["radial.kind"])
    return ModelConfig(p=p, n=n, spectrum=spectrum, radial=radial, tau=_number(merged, "model.tau"))


def build_spec(values: Dict[str, str]) -> ExperimentSpec:
    merged = {**DEFAULTS, **values}
    model = build_model(values)
    trials = _number(merged, "experiment.trials", int)
    if trials < 1:
        raise ConfigError("experiment.trials must be at least 1", ["experiment.trials"])
    c_left = _number(merged, "locallaw.c_left") if merged["locallaw.c_left"] else None
    try:
        omega_ns = tuple(int(item) for item in merged["omega.ns"].split(",") if item.strip())
    except ValueError:
        raise ConfigError(f"omega.ns must be comma-separated integers, got: {merged['omega.ns']}", ["omega.ns"])
    return ExperimentSpec(
        model=model,
        trials=trials,
        k_top=_number(merged, "experiment.k_top", int),
        seed_base=_number(merged, "experiment.seed", int),
        ensembles=_list(merged, "experiment.ensembles", ENSEMBLES),
        outputs=merged["experiment.outputs"] or default_output_dir(),
        checks=_list(merged, "experiment.checks", CHECKS),
        solver_tol=_number(merged, "solver.tol"),
        solver_max_iter=_number(merged, "solver.max_iter", int),
        omega_C=_number(merged, "omega.C"),
        omega_epsilon=_number(merged, "omega.epsilon"),
        c_left=c_left,
        C_right=_number(merged, "locallaw.C_right"),
        epsilon_e=_number(merged, "locallaw.epsilon_e"),
        locallaw_seeds=_number(merged, "locallaw.seeds", int),
        omega_ns=omega_ns,
        omega_seeds=_number(merged, "omega.seeds", int),
        comparison_pairs=_number(merged, "comparison.pairs", int),
    )


def load_config(path: str) -> Tuple[ModelConfig, ExperimentSpec]:
    """
    Read a config file.

    Raises:
        ConfigError: For unknown or malformed keys
        ValueError: If the model violates its assumptions
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}")
    spec = build_spec(parse_config_text(text))
    violations = validate(spec.model)
    if violations:
        raise ConfigError(f"Invalid model: {'; '.join(violations)}")
    return spec.model, spec


def load_or_build_table(path: Optional[str] = None):
    """Load a pinned TW1 table when `path` exists, else build it (and pin it if a path is given)."""
    if path and os.path.exists(path):
        logging.info(f"Using pinned TW1 table: {path}")
        return load_table(path)
    table = build_table()
    if path:
        save_table(table, path)
    return table


def _run_trial_job(job):
    config, edge_report, seed_base, index, k_top, ensembles, omega_C, omega_epsilon, tol, max_iter = job
    return run_trial(config, edge_report, seed_base, index, k_top=k_top, ensembles=ensembles,
                     omega_C=omega_C, omega_epsilon=omega_epsilon, tol=tol, max_iter=max_iter)


def _ensure_fresh(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise PersistenceError(f"{path} already exists; pass --force to append to it")


def _edge_passed(report) -> bool:
    if not report.regularity.passed or math.isnan(report.gamma0):
        return False
    if math.isnan(report.sqrt_fit_exponent):
        return True
    return abs(report.sqrt_fit_exponent - 0.5) <= SQRT_EXPONENT_TOLERANCE


def _ks_passed(*values: float) -> bool:
    return all(v <= KS_THRESHOLD for v in values if not math.isnan(v))


def run_comparison(spec: ExperimentSpec, lambda_plus: float, folder: str) -> bool:
    """
    Paired Green-function comparison of the two ensembles at three energies
    around the edge, F(x) = x. Passes when every difference is within 3 SE.
    """
    n = spec.model.n
    energies = lambda_plus + np.array([-1.0, 0.0, 1.0]) * n ** (-2.0 / 3.0)
    df = compare_ensembles_greenfn(spec.model, lambda_plus, "identity", energies, spec.comparison_pairs,
                                   seed_base=spec.seed_base)
    save_frame_to_csv(df, os.path.join(folder, "comparison.csv"))
    return bool(df["within_3se"].all())


def run_locallaw(spec: ExperimentSpec, lambda_plus: float, seeds: int, folder: str) -> bool:
    """Entrywise and averaged local laws on the default domain; writes both tables."""
    c_left = spec.c_left if spec.c_left is not None else DEFAULT_C_LEFT_FRACTION * lambda_plus
    domain = SpectralDomain(c_left, spec.C_right, spec.epsilon_e, lambda_plus)
    study = local_law_study(spec.model, domain, seeds, seed_base=spec.seed_base,
                            tol=spec.solver_tol, max_iter=spec.solver_max_iter)
    save_frame_to_csv(study.entrywise, os.path.join(folder, "entrywise.csv"))
    save_frame_to_csv(study.averaged, os.path.join(folder, "averaged.csv"))
    save_json(study.to_dict(), os.path.join(folder, "locallaw_summary.json"))
    return study.passed


def run_omega(spec: ExperimentSpec, ns: Sequence[int], seeds: int, folder: str) -> bool:
    """Omega pass rates per n; passes when they are non-decreasing in n."""
    df = omega_frequency(spec.model, ns, seeds, seed_base=spec.seed_base, C=spec.omega_C,
                         epsilon=spec.omega_epsilon, tol=spec.solver_tol, max_iter=spec.solver_max_iter)
    save_frame_to_csv(df, os.path.join(folder, "omega_frequency.csv"))
    return bool(np.all(np.diff(df["pass_rate"].to_numpy()) >= 0))


def run_campaign(spec: ExperimentSpec, table=None, threads: int = 1, force: bool = False) -> CampaignSummary:
    """
    Monte-Carlo validation of the Tracy-Widom limit for one model.

    Builds the limiting edge report once, refuses irregular models, runs the
    trials (in a process pool when threads > 1), appends them to the ledger
    and writes the summary JSON. Every entry of spec.checks is evaluated and
    recorded in summary.checks:

    - edge: regularity holds and the square-root fit is within 0.05 of 1/2
    - tw: KS distances of both ensembles to TW1 are within KS_THRESHOLD
    - comparison: two-sample KS within KS_THRESHOLD and paired Green-function
      differences within 3 SE
    - locallaw: both local laws at PASS_RATE with Ward identities exact
    - omega: Omega pass rates non-decreasing over spec.omega_ns

    Raises:
        RegularityError: If the limiting edge fails the regularity check
        PersistenceError: If the ledger exists and force is False
    """
    folder = prepare_output_folder(spec.outputs, "campaign")
    ledger_path = os.path.join(folder, "ledger.csv")
    _ensure_fresh(ledger_path, force)

    config = spec.model
    report = describe_edge(config, None, "limiting", fit="edge" in spec.checks,
                           tol=spec.solver_tol, max_iter=spec.solver_max_iter)
    if not report.regularity.passed or math.isnan(report.gamma0):
        logging.error(f"Campaign refused: {report.to_dict()}")
        raise RegularityError("Limiting edge fails the regularity check", report)
    table = table if table is not None else load_or_build_table()

    jobs = [(config, report, spec.seed_base, index, spec.k_top, spec.ensembles, spec.omega_C,
             spec.omega_epsilon, spec.solver_tol, spec.solver_max_iter) for index in range(spec.trials)]
    records = []
    if threads > 1:
        with cf.ProcessPoolExecutor(max_workers=threads) as ex:
            futs = [ex.submit(_run_trial_job, job) for job in jobs]
            for f in cf.as_completed(futs):
                records.append(f.result())
    else:
        for job in jobs:
            records.append(_run_trial_job(job))
    records.sort(key=lambda r: r.index)
    logging.info(f"Completed {len(records)} trials")

    ledger = pd.DataFrame([r.to_row() for r in records])
    append_frame_to_csv(ledger, ledger_path)

    included = [r for r in records if not r.excluded]
    n_excluded = len(records) - len(included)
    stats_ell = np.array([r.rescaled_stat for r in included if not math.isnan(r.rescaled_stat)])
    stats_gau = np.array([r.rescaled_stat_gaussian for r in included if not math.isnan(r.rescaled_stat_gaussian)])
    nan = float("nan")

    def moments(stats: np.ndarray) -> Tuple[float, float]:
        if not stats.size:
            return nan, nan
        return float(stats.mean()), float(stats.var(ddof=1 if stats.size > 1 else 0))

    mean_ell, var_ell = moments(stats_ell)
    mean_gau, var_gau = moments(stats_gau)
    ks_ell = ks_distance(stats_ell, table) if stats_ell.size else nan
    ks_gau = ks_distance(stats_gau, table) if stats_gau.size else nan
    ks_two = ks_two_sample(stats_ell, stats_gau) if stats_ell.size and stats_gau.size else nan

    checks: Dict[str, bool] = {}
    for check in spec.checks:
        if check == "edge":
            checks[check] = _edge_passed(report)
        elif check == "tw":
            checks[check] = _ks_passed(ks_ell, ks_gau)
        elif check == "comparison":
            checks[check] = _ks_passed(ks_two) and run_comparison(spec, report.edge, folder)
        elif check == "locallaw":
            checks[check] = run_locallaw(spec, report.edge, spec.locallaw_seeds, folder)
        elif check == "omega":
            checks[check] = run_omega(spec, spec.omega_ns, spec.omega_seeds, folder)
        logging.info(f"Check {check}: {'passed' if checks[check] else 'FAILED'}")

    summary = CampaignSummary(
        n_trials=len(records),
        n_excluded=n_excluded,
        ks_elliptical=ks_ell,
        ks_gaussian=ks_gau,
        ks_two_sample=ks_two,
        mean_stat=mean_ell,
        var_stat=var_ell,
        mean_stat_gaussian=mean_gau,
        var_stat_gaussian=var_gau,
        gamma0=report.gamma0,
        lambda_plus_limiting=report.edge,
        omega_pass_rate=float(np.mean([r.omega_pass for r in records])),
        flagged=n_excluded > EXCLUSION_THRESHOLD * len(records),
        seed_base=spec.seed_base,
        checks=checks,
    )
    if summary.flagged:
        logging.warning(f"{n_excluded} of {len(records)} trials excluded; campaign flagged")
    save_json(summary.to_dict(), os.path.join(folder, "summary.json"))
    return summary


# -- command line -------------------------------------------------------------

def _spec_from_args(args) -> ExperimentSpec:
    if args.config:
        _, spec = load_config(args.config)
    else:
        spec = build_spec({})
    overrides = {}
    if args.seed is not None:
        overrides["seed_base"] = args.seed
    if args.out:
        overrides["outputs"] = args.out
    if args.tol is not None:
        overrides["solver_tol"] = args.tol
    if getattr(args, "trials", None) is not None:
        overrides["trials"] = args.trials
    return replace(spec, **overrides)


def _cmd_edge(args, spec: ExperimentSpec) -> bool:
    report = describe_edge(spec.model, None, "limiting", tol=spec.solver_tol, max_iter=spec.solver_max_iter)
    print(to_json_text(report.to_dict()))
    folder = prepare_output_folder(spec.outputs, "edge")
    save_edge_report(report, os.path.join(folder, "edge_report.json"))
    return _edge_passed(report)


def _cmd_density(args, spec: ExperimentSpec) -> bool:
    config = spec.model
    grid = np.linspace(args.emin, args.emax, args.points)
    xi = None
    if args.mode == "empirical":
        xi = sample_radial(config.radial, config.n, trial_rng(spec.seed_base, 0).realization)
    curve = density(config, args.mode, args.variant, grid, xi_squared=xi,
                    tol=spec.solver_tol, max_iter=spec.solver_max_iter)
    folder = prepare_output_folder(spec.outputs, "density")
    save_density(curve, os.path.join(folder, f"density_{args.mode}_{args.variant}.csv"))
    return True


def _cmd_tw_table(args, spec: ExperimentSpec) -> bool:
    table = build_table(args.s_min, args.s_max, args.step)
    if args.out and args.out.endswith(".csv"):
        path = os.path.abspath(args.out)
        os.makedirs(os.path.dirname(path), exist_ok=True)
    else:
        path = os.path.join(prepare_output_folder(spec.outputs, "tw-table"), "tw1_table.csv")
    save_table(table, path)
    return True


def _cmd_campaign(args, spec: ExperimentSpec) -> bool:
    threads = args.threads or default_threads()
    table = load_or_build_table(args.table)
    summary = run_campaign(spec, table=table, threads=threads, force=args.force)
    print(to_json_text(summary.to_dict()))
    return summary.passed


def _cmd_locallaw(args, spec: ExperimentSpec) -> bool:
    report = describe_edge(spec.model, None, "limiting", fit=False, tol=spec.solver_tol,
                           max_iter=spec.solver_max_iter)
    seeds = args.seeds if args.seeds is not None else spec.locallaw_seeds
    return run_locallaw(spec, report.edge, seeds, prepare_output_folder(spec.outputs, "locallaw"))


def _cmd_omega(args, spec: ExperimentSpec) -> bool:
    if args.ns is not None:
        try:
            ns = [int(n) for n in args.ns.split(",")]
        except ValueError:
            raise ConfigError(f"--ns must be comma-separated integers, got: {args.ns}", ["omega.ns"])
    else:
        ns = list(spec.omega_ns)
    seeds = args.seeds if args.seeds is not None else spec.omega_seeds
    return run_omega(spec, ns, seeds, prepare_output_folder(spec.outputs, "omega"))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Experiment config file (dotted key=value lines)")
    common.add_argument("--seed", type=int, help="Seed base for all random streams")
    common.add_argument("--out", help="Output directory (tw-table also accepts a .csv path)")
    common.add_argument("--threads", type=int, help="Worker processes for trials")
    common.add_argument("--tol", type=float, help="Self-consistent solver tolerance")
    common.add_argument("--force", action="store_true", help="Append to existing outputs")

    ap = argparse.ArgumentParser(description="Edge statistics of elliptical sample covariance matrices.")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("edge", parents=[common], help="Print the limiting EdgeReport as JSON")

    p_density = sub.add_parser("density", parents=[common], help="Emit a DensityCurve CSV")
    p_density.add_argument("--mode", choices=("limiting", "empirical"), default="limiting")
    p_density.add_argument("--variant", choices=("m", "m1", "m2"), default="m")
    p_density.add_argument("--emin", type=float, default=0.05)
    p_density.add_argument("--emax", type=float, default=5.0)
    p_density.add_argument("--points", type=int, default=400)

    p_tw = sub.add_parser("tw-table", parents=[common], help="Build and export the TW1 table")
    p_tw.add_argument("--s-min", type=float, default=-10.0)
    p_tw.add_argument("--s-max", type=float, default=6.0)
    p_tw.add_argument("--step", type=float, default=1e-3)

    p_campaign = sub.add_parser("campaign", parents=[common], help="Run a Monte-Carlo campaign")
    p_campaign.add_argument("--trials", type=int, help="Number of trials")
    p_campaign.add_argument("--table", help="Pinned TW1 table CSV")

    p_local = sub.add_parser("locallaw", parents=[common], help="Run the local-law checks")
    p_local.add_argument("--seeds", type=int, help="Seeds (default locallaw.seeds)")

    p_omega = sub.add_parser("omega", parents=[common], help="Omega event frequency study")
    p_omega.add_argument("--ns", help="Comma-separated sample sizes (default omega.ns)")
    p_omega.add_argument("--seeds", type=int, help="Seeds per n (default omega.seeds)")
    return ap


COMMANDS = {
    "edge": _cmd_edge,
    "density": _cmd_density,
    "tw-table": _cmd_tw_table,
    "campaign": _cmd_campaign,
    "locallaw": _cmd_locallaw,
    "omega": _cmd_omega,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run one subcommand.

    Returns:
        0 when every requested check passes, 1 otherwise
    """
    args = build_parser().parse_args(argv)
    try:
        spec = _spec_from_args(args)
        passed = COMMANDS[args.command](args, spec)
    except ConfigError as e:
        logging.error(f"Configuration error: {e}")
        return 1
    except RegularityError as e:
        logging.error(f"Regularity error: {e}")
        if e.report is not None:
            print(to_json_text(e.report.to_dict()))
        return 1
    except ComputationError as e:
        logging.error(f"Computation error: {e}")
        return 1
    except ValueError as e:
        logging.error(f"Invalid input: {e}")
        return 1
    if not passed:
        logging.warning(f"{args.command}: checks did not pass")
    return 0 if passed else 1


if __name__ == "__main__":
    sys.exit(main())
