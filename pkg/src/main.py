#!/usr/bin/env python3
"""
Command-line entry point for crn-hierarchy.

Subcommands: analyze, simulate, compare, converge, audit. Every run writes its
CSV artifacts plus metadata.json into the output directory and exits with
0 (success), 1 (usage, IO or domain error) or 2 (detailed balance refuted).
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError

from src.cme import (
    TruncationError,
    assemble_generator,
    choose_box,
    distribution_rows,
    moments,
    poisson_state,
    solve_cme,
)
from src.fpe import (
    VARIANTS,
    CovarianceError,
    MonotonicityError,
    build_fpe,
    compare_birth_death_models,
    higher_order_coefficients,
    solve_fpe,
)
from src.hybrid import (
    build_merged,
    cm_rr_initial_state,
    fp_rr_initial_state,
    merged_point_mass,
    merged_snapshot_rows,
    solve_cm_rr,
    solve_fp_rr,
    solve_merged,
)
from src.network import (
    DetailedBalanceError,
    NetworkParseError,
    ReactionNetwork,
    check_detailed_balance,
    parse_network,
    stoichiometric_analysis,
)
from src.rre import IntegrationError, RreSystem, integrate_rre, joint_steady_state
from src.scalebridge import (
    ParticleEnsemble,
    cme_energy_audit,
    convergence_experiment,
    fit_entropy_bound,
    solve_liouville,
)
from src.state import RunState, new_run_state
from src.utils.artifacts import write_csv, write_json, write_metadata
from src.utils.conditions import EXIT_ERROR, error_kind, exit_code
from src.utils.config import (
    NETWORK_COMMANDS,
    SETTINGS_MODELS,
    ConfigError,
    ExperimentConfig,
    load_config,
    resolve_output_dir,
)
from src.utils.grids import discretized_gaussian

logger = logging.getLogger(__name__)

SIMULATE_MODELS = (
    ("rre", "cme", "liouville")
    + tuple(f"fpe:{v}" for v in VARIANTS)
    + ("hybrid:fp_rr", "hybrid:cm_rr", "hybrid:merged")
)

DOMAIN_ERRORS = (
    NetworkParseError,
    DetailedBalanceError,
    ConfigError,
    TruncationError,
    IntegrationError,
    CovarianceError,
    MonotonicityError,
    ValueError,
    RuntimeError,
    OSError,
)


class UsageError(Exception):
    """Bad command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ============================================================
# Shared helpers
# ============================================================


def load_network(path) -> ReactionNetwork:
    text = Path(path).read_text(encoding="utf-8")
    return parse_network(text)


def initial_concentrations(sys_: RreSystem, c0) -> np.ndarray:
    """Configured c0, else c_* when detailed balance holds, else ones."""
    if c0 is not None:
        c0 = np.asarray(c0, dtype=float)
        if c0.shape != (sys_.net.I,):
            raise ValueError(f"c0 needs {sys_.net.I} entries, got {c0.size}")
        if np.any(c0 < 0):
            raise ValueError("c0 must be nonnegative")
        return c0
    if sys_.db.holds:
        return sys_.c_star.copy()
    return np.ones(sys_.net.I)


def birth_death_rates(net: ReactionNetwork) -> Tuple[float, float]:
    """(a, b) of a network that is exactly ∅ ⇌ X, in either orientation."""
    if net.I != 1 or net.R != 1 or not net.reversible:
        raise ValueError("this model needs the birth-death network 0 <-> X")
    lhs, rhs = int(net.alpha[0, 0]), int(net.beta[0, 0])
    if (lhs, rhs) == (1, 0):
        return float(net.k_bw[0]), float(net.k_fw[0])
    if (lhs, rhs) == (0, 1):
        return float(net.k_fw[0]), float(net.k_bw[0])
    raise ValueError("this model needs the birth-death network 0 <-> X")


def cm_rr_parameters(net: ReactionNetwork) -> Tuple[int, float, float]:
    """(β, k_fw, k_bw) of a network that is exactly X1 ⇌ βX2."""
    ok = net.I == 2 and net.R == 1 and net.reversible
    if ok:
        alpha, beta = net.alpha[0], net.beta[0]
        ok = tuple(alpha) == (1, 0) and beta[0] == 0 and beta[1] >= 1
    if not ok:
        raise ValueError("hybrid:cm_rr needs a network of the form X1 <-> beta X2")
    return int(net.beta[0, 1]), float(net.k_fw[0]), float(net.k_bw[0])


def default_window(c0: np.ndarray, c_star: np.ndarray, V: float) -> float:
    top = float(max(np.max(c0), np.max(c_star)))
    return max(4.0 * top, top + 10.0 / np.sqrt(V))


def _record(state: RunState, path: Path) -> None:
    state["artifacts"].append(path.name)


# ============================================================
# Commands
# ============================================================


def cmd_analyze(settings, out_dir: Path, state: RunState):
    """Certify or refute detailed balance and write detailed_balance.json."""
    net = load_network(settings.network)
    stoich = stoichiometric_analysis(net)
    report = check_detailed_balance(net, stoich, tol=settings.tol)
    state["detailed_balance"] = report.holds

    _record(state, write_json(out_dir / "detailed_balance.json", report.model_dump()))
    _record(state, write_json(out_dir / "stoichiometry.json", stoich.to_dict()))
    state["audits"]["n_W"] = stoich.n_W
    state["audits"]["m_W"] = stoich.m_W

    if not report.holds and net.R > 0:
        steady = joint_steady_state(RreSystem.from_network(net), np.ones(net.I))
        state["audits"]["joint_steady_state"] = steady.tolist()

    lines = [f"species: {' '.join(net.species_names)}", f"reactions: {net.R}, n_W = {stoich.n_W}"]
    if report.holds:
        lines.append("detailed balance: holds")
        lines.append("c_* = " + ", ".join(f"{x:.12g}" for x in report.c_star))
    else:
        lines.append(f"detailed balance: fails ({report.reason})")
        if report.witness is not None:
            lines.append("witness y = " + ", ".join(f"{x:.6g}" for x in report.witness))
        if "joint_steady_state" in state["audits"]:
            steady = state["audits"]["joint_steady_state"]
            lines.append("joint steady state = " + ", ".join(f"{x:.12g}" for x in steady))
    state["messages"].extend(lines)
    print("\n".join(lines))
    return report


def _simulate_rre(sys_, settings, c0, times, out_dir, state):
    trajectory = integrate_rre(sys_, c0, settings.t_end, tol=settings.tol, t_eval=times)
    _record(state, write_csv(out_dir / "trajectory.csv", trajectory.header(), trajectory.table()))
    drift = np.abs(trajectory.conserved - trajectory.conserved[0])
    state["audits"]["conserved_drift"] = float(drift.max()) if drift.size else 0.0
    if sys_.db.holds:
        state["audits"]["max_energy_increase"] = float(np.max(np.diff(trajectory.energy), initial=0.0))


def _simulate_cme(sys_, settings, c0, times, out_dir, state):
    reference = np.maximum(c0, sys_.c_star) if sys_.db.holds else c0
    box = choose_box(np.maximum(reference, 1.0 / settings.V), settings.V, settings.tail)
    cme = assemble_generator(sys_.net, box, sys_.db if sys_.db.holds else None)
    solution = solve_cme(cme, poisson_state(box, c0), times)
    header, _ = distribution_rows(cme, solution.distributions[0])
    snapshots = []
    for t, u in zip(solution.times, solution.distributions):
        _, rows = distribution_rows(cme, u)
        snapshots.extend([t, *row] for row in rows)
    _record(state, write_csv(out_dir / "distributions.csv", ["t"] + header, snapshots))

    names = sys_.net.species_names
    moment_header = ["t"] + [f"mean_{n}" for n in names] + [f"var_{n}" for n in names]
    moment_rows = []
    for t, u in zip(solution.times, solution.distributions):
        mean, cov = moments(cme, u)
        moment_rows.append([t, *mean, *np.diag(cov)])
    _record(state, write_csv(out_dir / "moments.csv", moment_header, moment_rows))
    state["audits"].update(
        box_shape=list(box.shape),
        mass_loss=float(solution.mass_loss[-1]),
        leak_estimate=float(solution.leak_estimate[-1]),
    )


def _simulate_liouville(sys_, settings, c0, times, out_dir, state):
    solution = solve_liouville(sys_, ParticleEnsemble.dirac(c0), settings.t_end, tol=1e-10, num=len(times))
    means = np.einsum("k,tki->ti", solution.weights, solution.points)
    header = ["t"] + [f"mean_{n}" for n in sys_.net.species_names] + ["E", "dissipation", "residual"]
    table = np.column_stack([solution.times, means, solution.energy, solution.dissipation, solution.residual])
    _record(state, write_csv(out_dir / "liouville.csv", header, table))
    state["audits"]["max_energy_residual"] = float(np.max(np.abs(solution.residual)))


def _simulate_fpe(sys_, settings, c0, variant, out_dir, state):
    window = settings.window or default_window(c0, sys_.c_star, settings.V)
    model = build_fpe(sys_, settings.V, variant, window, settings.cells)
    h = float(np.max(model.grid.spacing))
    rho0 = discretized_gaussian(model.grid, c0, np.maximum(c0 / settings.V, (2.0 * h) ** 2))
    solution = solve_fpe(model, rho0, settings.t_end, settings.dt)

    names = sys_.net.species_names
    header = ["t"] + [f"mean_{n}" for n in names] + ["mass"]
    _record(
        state,
        write_csv(out_dir / "fpe_moments.csv", header, np.column_stack([solution.times, solution.means, solution.mass])),
    )
    density_header = [f"c_{n}" for n in names] + ["rho_final", "rho_stationary"]
    density = np.column_stack([model.grid.nodes, solution.densities[-1], model.stationary_density()])
    _record(state, write_csv(out_dir / "fpe_density.csv", density_header, density))
    state["audits"].update(
        window=window,
        mass_drift=float(np.max(np.abs(solution.mass - solution.mass[0]))),
        stationarity_residual=model.stationarity_residual(),
    )
    if variant == "corrected" and np.all(c0 > 0):
        coefficients = higher_order_coefficients(sys_, c0, settings.V, settings.theta1, settings.theta2)
        state["audits"]["higher_order"] = {
            "coercive": coefficients.coercive(),
            "monotone": coefficients.monotone(),
            "upsilon2_enlargement": coefficients.upsilon2_enlargement.tolist(),
        }


def _simulate_fp_rr(sys_, settings, c0, out_dir, state):
    J = settings.J
    window = settings.window or default_window(c0[:J], sys_.c_star[:J], settings.V)
    state0 = fp_rr_initial_state(sys_, J, c0, settings.V, window, settings.cells)
    solution = solve_fp_rr(sys_, J, state0, settings.V, settings.t_end, settings.dt)
    header = solution.header(sys_.net.species_names)
    _record(state, write_csv(out_dir / "hybrid_fp_rr.csv", header, solution.table()))
    state["audits"].update(
        mass_drift=float(np.max(np.abs(solution.mass - 1.0))),
        max_energy_increase=float(np.max(np.diff(solution.energy), initial=0.0)),
    )


def _simulate_cm_rr(sys_, settings, c0, times, out_dir, state):
    beta, k_fw, k_bw = cm_rr_parameters(sys_.net)
    state0 = cm_rr_initial_state(settings.V, c0[0], c0[1], beta)
    solution = solve_cm_rr(
        beta, state0, settings.V, settings.t_end, tol=min(settings.tol, 1e-10), k_fw=k_fw, k_bw=k_bw, t_eval=times
    )
    _record(state, write_csv(out_dir / "hybrid_cm_rr.csv", solution.header(), solution.table()))
    state["audits"]["conserved_drift"] = float(np.max(np.abs(solution.conserved - solution.conserved[0])))


def _simulate_merged(sys_, settings, c0, out_dir, state):
    a_rate, b_rate = birth_death_rates(sys_.net)
    model = build_merged(a_rate, b_rate, settings.V, settings.N)
    n0 = int(min(round(settings.V * c0[0]), settings.N - 1))
    solution = solve_merged(model, merged_point_mass(model, n0), settings.t_end, settings.dt)
    _record(state, write_csv(out_dir / "hybrid_merged.csv", solution.header(), solution.table()))
    snapshot = merged_snapshot_rows(model, solution.states[-1])
    _record(state, write_csv(out_dir / "merged_snapshot.csv", ["section", "c", "value"], snapshot))
    state["audits"].update(
        mass_drift=float(np.max(np.abs(solution.mass - 1.0))),
        stationarity_residual=model.stationarity_residual(),
        final_mean=float(solution.mean[-1]),
    )


def cmd_simulate(settings, out_dir: Path, state: RunState) -> None:
    """Run one model of the hierarchy and write its CSV artifacts."""
    tag = settings.model
    state["model"] = tag
    if tag not in SIMULATE_MODELS:
        raise ValueError(f"unknown model tag {tag!r}; expected one of {', '.join(SIMULATE_MODELS)}")
    net = load_network(settings.network)
    sys_ = RreSystem.from_network(net)
    c0 = initial_concentrations(sys_, settings.c0)
    times = np.linspace(0.0, settings.t_end, settings.outputs)
    logger.info("simulate %s on %d species, %d reactions", tag, net.I, net.R)

    if tag == "rre":
        _simulate_rre(sys_, settings, c0, times, out_dir, state)
    elif tag == "cme":
        _simulate_cme(sys_, settings, c0, times, out_dir, state)
    elif tag == "liouville":
        _simulate_liouville(sys_, settings, c0, times, out_dir, state)
    elif tag.startswith("fpe:"):
        _simulate_fpe(sys_, settings, c0, tag.split(":", 1)[1], out_dir, state)
    elif tag == "hybrid:fp_rr":
        _simulate_fp_rr(sys_, settings, c0, out_dir, state)
    elif tag == "hybrid:cm_rr":
        _simulate_cm_rr(sys_, settings, c0, times, out_dir, state)
    else:
        _simulate_merged(sys_, settings, c0, out_dir, state)


def cmd_compare(settings, out_dir: Path, state: RunState):
    """CME, Liouville and both Gaussian closures of ∅ ⇌ X plus FPE equilibria."""
    a_rate, b_rate = settings.a_rate, settings.b_rate
    if settings.network is not None:
        a_rate, b_rate = birth_death_rates(load_network(settings.network))
    times = np.linspace(0.0, settings.t_end, settings.outputs)
    report = compare_birth_death_models(
        a_rate, b_rate, settings.V, times, c0=settings.c0, window=settings.window, cells=settings.cells
    )
    _record(state, write_csv(out_dir / "comparison.csv", report.header(), report.rows))
    _record(state, write_json(out_dir / "comparison_summary.json", report.summary.model_dump()))
    state["audits"]["cle_equilibrium_sup_error"] = report.summary.cle_equilibrium_sup_error
    state["audits"]["simple_stationarity_residual"] = report.summary.simple_stationarity_residual
    return report


def cmd_converge(settings, out_dir: Path, state: RunState):
    """V-sweep of CME solutions against the RRE plus the entropy-bound fit."""
    sys_ = RreSystem.from_network(load_network(settings.network))
    sys_.require_detailed_balance()
    c0 = initial_concentrations(sys_, settings.c0) if settings.c0 is not None else 2.0 * sys_.c_star
    table = convergence_experiment(sys_, c0, settings.t_eval, settings.V_list, settings.tail)
    header, data = table.table()
    _record(state, write_csv(out_dir / "convergence.csv", header, data))

    bound = fit_entropy_bound(sys_.c_star, settings.bound_V_list)
    rows = [[V, K] for V, K in bound["K"].items()]
    _record(state, write_csv(out_dir / "entropy_bound.csv", ["V", "K"], rows))
    state["audits"].update(
        slope_estimate=table.slope_estimate,
        mean_error_decreasing=bool(np.all(np.diff(data[:, 1]) < 0)),
        entropy_bound_K=bound["K_star"],
        entropy_bound_spread=bound["spread"],
    )
    return table


def cmd_audit(settings, out_dir: Path, state: RunState, rng: np.random.Generator) -> None:
    """Energy–dissipation audits of a CME solve and a random Liouville ensemble."""
    sys_ = RreSystem.from_network(load_network(settings.network))
    sys_.require_detailed_balance()
    c0 = initial_concentrations(sys_, settings.c0) if settings.c0 is not None else 2.0 * sys_.c_star
    times = np.linspace(0.0, settings.t_end, settings.outputs)

    box = choose_box(np.maximum(c0, sys_.c_star), settings.V, settings.tail)
    cme = assemble_generator(sys_.net, box, sys_.db)
    solution = solve_cme(cme, poisson_state(box, c0), times)
    audit = cme_energy_audit(cme, times, solution.distributions)
    header, table = audit.table()
    _record(state, write_csv(out_dir / "audit_cme.csv", header, table))

    points = c0[None, :] * np.exp(0.2 * rng.standard_normal((settings.atoms, sys_.net.I)))
    ensemble = ParticleEnsemble(np.full(settings.atoms, 1.0 / settings.atoms), points)
    liouville = solve_liouville(sys_, ensemble, settings.t_end, num=len(times))
    lio_table = np.column_stack([liouville.times, liouville.energy, liouville.dissipation, liouville.residual])
    _record(state, write_csv(out_dir / "audit_liouville.csv", ["t", "E_V", "dissipation", "residual"], lio_table))

    drop = abs(audit.entropy[-1] - audit.entropy[0])
    state["audits"].update(
        cme_residual=float(abs(audit.residual[-1])),
        cme_relative_residual=float(abs(audit.residual[-1]) / drop) if drop > 0 else 0.0,
        cme_leak_allowance=float(audit.leak_allowance[-1]),
        cme_entropy_monotone=bool(np.all(np.diff(audit.entropy) <= 1e-12)),
        liouville_max_residual=float(np.max(np.abs(liouville.residual))),
    )


# ============================================================
# Argument parsing and dispatch
# ============================================================


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--out", help="output directory (overrides CRN_OUTPUT_DIR and [output] dir)")
    common.add_argument("--seed", type=int, help="seed for randomized runs")
    common.add_argument("--verbose", action="store_true", help="DEBUG logging")
    common.add_argument("--network", help="network file (overrides the config)")

    parser = _Parser(prog="crn-hierarchy", description="Reaction networks across scales")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("analyze", parents=[common], help="certify or refute detailed balance")
    simulate = sub.add_parser("simulate", parents=[common], help="run one model of the hierarchy")
    simulate.add_argument("--model", help="model tag: " + ", ".join(SIMULATE_MODELS))
    sub.add_parser("compare", parents=[common], help="birth-death model comparison")
    sub.add_parser("converge", parents=[common], help="CME to RRE V-sweep")
    sub.add_parser("audit", parents=[common], help="energy-dissipation audits")
    return parser


def resolve_settings(command: str, config: ExperimentConfig, args) -> BaseModel:
    """Section of `config` for `command` with command-line overrides applied."""
    section = getattr(config, command)
    values = section.model_dump() if section is not None else {}
    if getattr(args, "network", None):
        values["network"] = Path(args.network)
    if command == "simulate" and getattr(args, "model", None):
        values["model"] = args.model
    if command in NETWORK_COMMANDS and values.get("network") is None:
        raise ConfigError(f"{command} needs a network: set it in [{command}] or pass --network")
    try:
        return SETTINGS_MODELS[command](**values)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"crn-hierarchy: {exc}", file=sys.stderr)
        return EXIT_ERROR

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    config = ExperimentConfig()
    config_error = None
    if args.config:
        try:
            config = load_config(args.config)
        except ConfigError as exc:
            config_error = exc

    seed = args.seed if args.seed is not None else config.seed
    out_dir = resolve_output_dir(config, args.out)
    state = new_run_state(args.command, str(out_dir), seed, args.config)
    settings = None
    try:
        if config_error is not None:
            raise config_error
        settings = resolve_settings(args.command, config, args)
        out_dir.mkdir(parents=True, exist_ok=True)
        logger.info("Running %s, output in %s", args.command, out_dir)
        if args.command == "analyze":
            cmd_analyze(settings, out_dir, state)
        elif args.command == "simulate":
            cmd_simulate(settings, out_dir, state)
        elif args.command == "compare":
            cmd_compare(settings, out_dir, state)
        elif args.command == "converge":
            cmd_converge(settings, out_dir, state)
        else:
            cmd_audit(settings, out_dir, state, np.random.default_rng(seed))
    except DOMAIN_ERRORS as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        state["error"] = str(exc)
        state["error_kind"] = error_kind(exc)

    echo = settings.model_dump(mode="json") if settings is not None else {}
    try:
        write_metadata(out_dir, state, echo)
    except OSError as exc:
        logger.error("cannot write metadata: %s", exc)
        state["error"] = state["error"] or str(exc)

    code = exit_code(state)
    logger.info("%s finished with exit code %d", args.command, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
