"""
Reaction networks: parsing, exact stoichiometric analysis and detailed balance.

A network is a tuple of species names plus R reaction pairs
α^r ⇌ β^r with mass-action rates k_fw^r, k_bw^r. The text format is

    # comment
    species A B C
    2 A + B <-> C : kf=1.0, kb=0.5
    0 -> A : kf=2.0

where "0" denotes the empty complex and "->" declares a one-way reaction.
"""

import logging
import re
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property, reduce
from math import gcd
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import sympy as sp
from pydantic import BaseModel

logger = logging.getLogger(__name__)

# Tolerance on the norm of the projection of log(k_bw/k_fw) onto Ker Wᵀ
WEGSCHEIDER_TOL = 1e-9

_NAME = r"[A-Za-z_][A-Za-z0-9_]*"
_NAME_RE = re.compile(rf"^{_NAME}$")
_TERM_RE = re.compile(rf"^(?:(\d+)\s*)?({_NAME})$")
_REACTION_RE = re.compile(r"^(?P<lhs>.+?)\s*(?P<arrow><->|->)\s*(?P<rhs>.+?)\s*:\s*(?P<rates>.+)$")


class NetworkParseError(ValueError):
    """Raised for malformed network documents; carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DetailedBalanceError(ValueError):
    """Raised when an operation needs c_* but detailed balance does not hold."""


# ============================================================
# Network types
# ============================================================


@dataclass(frozen=True)
class Reaction:
    """One reaction pair α ⇌ β; k_bw = 0 marks a one-way reaction α → β."""

    alpha: Tuple[int, ...]
    beta: Tuple[int, ...]
    k_fw: float
    k_bw: float

    @property
    def reversible(self) -> bool:
        return self.k_bw > 0


@dataclass(frozen=True)
class ReactionNetwork:
    """Immutable mass-action network; the source of every downstream model."""

    species_names: Tuple[str, ...]
    reactions: Tuple[Reaction, ...] = field(default_factory=tuple)

    def __post_init__(self):
        names = tuple(self.species_names)
        object.__setattr__(self, "species_names", names)
        object.__setattr__(self, "reactions", tuple(self.reactions))
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate species in {names}")
        for name in names:
            if not _NAME_RE.match(name):
                raise ValueError(f"invalid species name {name!r}")
        for r, reaction in enumerate(self.reactions):
            if len(reaction.alpha) != len(names) or len(reaction.beta) != len(names):
                raise ValueError(f"reaction {r} has wrong coefficient length")
            if any(x < 0 for x in reaction.alpha + reaction.beta):
                raise ValueError(f"reaction {r} has negative coefficients")
            if reaction.alpha == reaction.beta:
                raise ValueError(f"reaction {r} has alpha == beta")
            if not (reaction.k_fw > 0 and np.isfinite(reaction.k_fw)):
                raise ValueError(f"reaction {r} needs a positive forward rate")
            if not (reaction.k_bw >= 0 and np.isfinite(reaction.k_bw)):
                raise ValueError(f"reaction {r} has an invalid backward rate")

    @classmethod
    def from_arrays(cls, species_names: Sequence[str], alpha, beta, k_fw, k_bw) -> "ReactionNetwork":
        alpha = np.atleast_2d(np.asarray(alpha, dtype=int))
        beta = np.atleast_2d(np.asarray(beta, dtype=int))
        reactions = tuple(
            Reaction(
                alpha=tuple(int(x) for x in a),
                beta=tuple(int(x) for x in b),
                k_fw=float(kf),
                k_bw=float(kb),
            )
            for a, b, kf, kb in zip(alpha, beta, np.ravel(k_fw), np.ravel(k_bw))
        )
        return cls(tuple(species_names), reactions)

    @property
    def I(self) -> int:
        return len(self.species_names)

    @property
    def R(self) -> int:
        return len(self.reactions)

    @cached_property
    def alpha(self) -> np.ndarray:
        return np.array([r.alpha for r in self.reactions], dtype=int).reshape(self.R, self.I)

    @cached_property
    def beta(self) -> np.ndarray:
        return np.array([r.beta for r in self.reactions], dtype=int).reshape(self.R, self.I)

    @cached_property
    def k_fw(self) -> np.ndarray:
        return np.array([r.k_fw for r in self.reactions], dtype=float)

    @cached_property
    def k_bw(self) -> np.ndarray:
        return np.array([r.k_bw for r in self.reactions], dtype=float)

    @cached_property
    def W(self) -> np.ndarray:
        """Wegscheider matrix, rows γ^r = α^r − β^r."""
        return self.alpha - self.beta

    @property
    def reversible(self) -> bool:
        return all(r.reversible for r in self.reactions)


# ============================================================
# Parsing and serialization
# ============================================================


def _parse_side(text: str, index: Dict[str, int], line: int) -> Tuple[int, ...]:
    coeffs = [0] * len(index)
    text = text.strip()
    if text == "0":
        return tuple(coeffs)
    for term in text.split("+"):
        match = _TERM_RE.match(term.strip())
        if not match:
            raise NetworkParseError(f"malformed term {term.strip()!r}", line)
        count = int(match.group(1)) if match.group(1) else 1
        name = match.group(2)
        if name not in index:
            raise NetworkParseError(f"unknown species {name!r}", line)
        if count == 0:
            raise NetworkParseError(f"zero coefficient for {name!r}", line)
        coeffs[index[name]] += count
    return tuple(coeffs)


def _parse_rates(text: str, arrow: str, line: int) -> Tuple[float, float]:
    rates: Dict[str, float] = {}
    for item in text.split(","):
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in ("kf", "kb"):
            raise NetworkParseError(f"malformed rate {item.strip()!r}", line)
        if key in rates:
            raise NetworkParseError(f"duplicate rate {key}", line)
        try:
            number = float(value)
        except ValueError:
            raise NetworkParseError(f"rate {key} is not a number: {value.strip()!r}", line)
        if not (number > 0 and np.isfinite(number)):
            raise NetworkParseError(f"rate {key} must be positive, got {value.strip()}", line)
        rates[key] = number

    if "kf" not in rates:
        raise NetworkParseError("missing kf", line)
    if arrow == "<->":
        if "kb" not in rates:
            raise NetworkParseError("missing kb for reversible reaction", line)
        return rates["kf"], rates["kb"]
    if "kb" in rates:
        raise NetworkParseError("one-way reaction '->' takes no kb", line)
    return rates["kf"], 0.0


def parse_network(text: str) -> ReactionNetwork:
    """
    Parse a network document.

    Args:
        text: UTF-8 network document

    Returns:
        ReactionNetwork with species in order of first declaration

    Raises:
        NetworkParseError: syntax error, unknown species, nonpositive rate, α = β
    """
    species: List[str] = []
    pending: List[Tuple[int, str, str, str, str]] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0].strip()
        if not content:
            continue
        head, *tail = content.split(None, 1)
        if head == "species":
            rest = tail[0] if tail else ""
            for name in rest.split():
                if not _NAME_RE.match(name):
                    raise NetworkParseError(f"invalid species name {name!r}", lineno)
                if name in species:
                    raise NetworkParseError(f"species {name!r} declared twice", lineno)
                species.append(name)
            continue
        match = _REACTION_RE.match(content)
        if not match:
            raise NetworkParseError(f"cannot parse {content!r}", lineno)
        pending.append((lineno, match["lhs"], match["arrow"], match["rhs"], match["rates"]))

    if not species:
        raise NetworkParseError("no species declared", 1)

    index = {name: i for i, name in enumerate(species)}
    reactions = []
    for lineno, lhs, arrow, rhs, rate_text in pending:
        alpha = _parse_side(lhs, index, lineno)
        beta = _parse_side(rhs, index, lineno)
        if alpha == beta:
            raise NetworkParseError("reactant and product complexes coincide", lineno)
        k_fw, k_bw = _parse_rates(rate_text, arrow, lineno)
        reactions.append(Reaction(alpha=alpha, beta=beta, k_fw=k_fw, k_bw=k_bw))

    net = ReactionNetwork(tuple(species), tuple(reactions))
    logger.debug("Parsed network with I=%d species and R=%d reactions", net.I, net.R)
    return net


def _format_side(names: Sequence[str], coeffs: Sequence[int]) -> str:
    terms = []
    for name, count in zip(names, coeffs):
        if count == 1:
            terms.append(name)
        elif count > 1:
            terms.append(f"{count} {name}")
    return " + ".join(terms) if terms else "0"


def serialize_network(net: ReactionNetwork) -> str:
    """Canonical text form; parse_network(serialize_network(net)) == net."""
    lines = ["species " + " ".join(net.species_names)]
    for reaction in net.reactions:
        lhs = _format_side(net.species_names, reaction.alpha)
        rhs = _format_side(net.species_names, reaction.beta)
        if reaction.reversible:
            lines.append(f"{lhs} <-> {rhs} : kf={reaction.k_fw!r}, kb={reaction.k_bw!r}")
        else:
            lines.append(f"{lhs} -> {rhs} : kf={reaction.k_fw!r}")
    return "\n".join(lines) + "\n"


# ============================================================
# Exact stoichiometric analysis
# ============================================================


def _gcd_list(xs: List[int]) -> int:
    xs = [abs(x) for x in xs if x != 0]
    return reduce(gcd, xs, 0) if xs else 1


def _lcm(a: int, b: int) -> int:
    return abs(a * b) // gcd(a, b) if a and b else abs(a or b)


def _to_fractions(vec) -> Tuple[Fraction, ...]:
    out = []
    for x in vec:
        x = sp.Rational(x)
        out.append(Fraction(int(x.p), int(x.q)))
    return tuple(out)


def _primitive_int(vec: Sequence[Fraction]) -> Tuple[int, ...]:
    scale = reduce(_lcm, [f.denominator for f in vec], 1)
    ints = [int(f * scale) for f in vec]
    g = _gcd_list(ints)
    ints = [x // g for x in ints]
    # first nonzero entry positive
    for x in ints:
        if x != 0:
            if x < 0:
                ints = [-y for y in ints]
            break
    return tuple(ints)


@dataclass(frozen=True)
class StoichiometryReport:
    """Exact stoichiometric data: W, a basis of 𝕊 = Ran Wᵀ, ℚ, m_W, n_W and Ker Wᵀ."""

    W: np.ndarray
    S_basis: Tuple[Tuple[Fraction, ...], ...]
    Q: np.ndarray
    m_W: int
    n_W: int
    rank: int
    kerWT_basis: Tuple[Tuple[Fraction, ...], ...]

    def to_dict(self) -> dict:
        return {
            "W": self.W.tolist(),
            "S_basis": [[str(x) for x in v] for v in self.S_basis],
            "Q": self.Q.tolist(),
            "m_W": self.m_W,
            "n_W": self.n_W,
            "rank": self.rank,
            "kerWT_basis": [[str(x) for x in v] for v in self.kerWT_basis],
        }


def stoichiometric_analysis(net: ReactionNetwork) -> StoichiometryReport:
    """
    Exact rank, conservation matrix ℚ (integer basis of Ker W) and Ker Wᵀ.

    Args:
        net: Reaction network

    Returns:
        StoichiometryReport with ℚWᵀ = 0 in integer arithmetic
    """
    I, R = net.I, net.R
    W = net.W.copy()

    if R == 0:
        return StoichiometryReport(
            W=W.reshape(0, I),
            S_basis=(),
            Q=np.eye(I, dtype=int),
            m_W=I,
            n_W=0,
            rank=0,
            kerWT_basis=(),
        )

    Wsym = sp.Matrix(W.tolist())
    rank = int(Wsym.rank())
    q_rows = [_primitive_int(_to_fractions(v)) for v in Wsym.nullspace()]
    Q = np.array(q_rows, dtype=int).reshape(len(q_rows), I)
    kerWT = tuple(_to_fractions(v) for v in Wsym.T.nullspace())
    S_basis = tuple(_to_fractions(v) for v in Wsym.rowspace())

    report = StoichiometryReport(
        W=W,
        S_basis=S_basis,
        Q=Q,
        m_W=I - rank,
        n_W=R - rank,
        rank=rank,
        kerWT_basis=kerWT,
    )
    logger.debug("Stoichiometry: rank=%d m_W=%d n_W=%d", rank, report.m_W, report.n_W)
    return report


# ============================================================
# Invariant sets
# ============================================================


@dataclass(frozen=True)
class InvariantSetTag:
    """Value q = ℚc labelling the invariant set 𝐈(q)."""

    q: Tuple[float, ...]

    def same_set(self, other: "InvariantSetTag", tol: float = 1e-10) -> bool:
        if len(self.q) != len(other.q):
            return False
        return bool(np.all(np.abs(np.subtract(self.q, other.q)) <= tol))


def conserved_value(report: StoichiometryReport, c) -> InvariantSetTag:
    """Return ℚc for a concentration vector c."""
    c = np.asarray(c, dtype=float)
    if c.shape != (report.Q.shape[1],):
        raise ValueError(f"expected a vector of length {report.Q.shape[1]}, got shape {c.shape}")
    return InvariantSetTag(tuple(float(x) for x in report.Q @ c))


def same_invariant_set(report: StoichiometryReport, c1, c2, tol: float = 1e-10) -> bool:
    return conserved_value(report, c1).same_set(conserved_value(report, c2), tol)


# ============================================================
# Detailed balance
# ============================================================


class DetailedBalanceReport(BaseModel):
    """Certificate (c_*, κ_*) or Wegscheider witness; serialized as JSON."""

    holds: bool
    species_names: List[str]
    c_star: Optional[List[float]] = None
    kappa_star: Optional[List[float]] = None
    witness: Optional[List[float]] = None
    witness_value: Optional[float] = None
    residual: float = 0.0
    solution_family_dim: int = 0
    n_W: int = 0
    reason: str = ""

    def c_star_vector(self) -> np.ndarray:
        if not self.holds or self.c_star is None:
            raise DetailedBalanceError(f"detailed balance does not hold: {self.reason}")
        return np.asarray(self.c_star, dtype=float)

    def kappa_vector(self) -> np.ndarray:
        if not self.holds or self.kappa_star is None:
            raise DetailedBalanceError(f"detailed balance does not hold: {self.reason}")
        return np.asarray(self.kappa_star, dtype=float)


def check_detailed_balance(
    net: ReactionNetwork,
    report: Optional[StoichiometryReport] = None,
    tol: float = WEGSCHEIDER_TOL,
) -> DetailedBalanceReport:
    """
    Certify or refute detailed balance.

    Solves W log c_* = log(k_bw/k_fw) in the minimum-norm sense and tests the
    Wegscheider conditions through the norm of the least-squares residual, the
    projection of log(k_bw/k_fw) onto Ker Wᵀ; its direction is the witness.

    Args:
        net: Reaction network
        report: Stoichiometry report (computed when omitted)
        tol: Tolerance on the Wegscheider residuals

    Returns:
        DetailedBalanceReport
    """
    if report is None:
        report = stoichiometric_analysis(net)
    names = list(net.species_names)

    if not net.reversible:
        return DetailedBalanceReport(
            holds=False,
            species_names=names,
            residual=float("inf"),
            solution_family_dim=report.m_W,
            n_W=report.n_W,
            reason="network contains one-way reactions",
        )

    if net.R == 0:
        return DetailedBalanceReport(
            holds=True,
            species_names=names,
            c_star=[1.0] * net.I,
            kappa_star=[],
            solution_family_dim=report.m_W,
            n_W=0,
            reason="empty network",
        )

    W = net.W.astype(float)
    rhs = np.log(net.k_bw / net.k_fw)
    log_c, *_ = np.linalg.lstsq(W, rhs, rcond=None)
    # least-squares residual = projection of rhs onto Ker Wᵀ
    violation = rhs - W @ log_c
    residual = float(np.linalg.norm(violation))

    if report.n_W > 0 and residual > tol:
        logger.info("Detailed balance fails: Wegscheider residual %.3e", residual)
        return DetailedBalanceReport(
            holds=False,
            species_names=names,
            witness=(violation / residual).tolist(),
            witness_value=residual,
            residual=residual,
            solution_family_dim=report.m_W,
            n_W=report.n_W,
            reason="Wegscheider condition violated",
        )

    c_star = np.exp(log_c)
    kappa = net.k_fw * np.prod(c_star ** net.alpha, axis=1)
    logger.info("Detailed balance holds: c_* = %s", np.array2string(c_star, precision=6))
    return DetailedBalanceReport(
        holds=True,
        species_names=names,
        c_star=c_star.tolist(),
        kappa_star=kappa.tolist(),
        residual=residual,
        solution_family_dim=report.m_W,
        n_W=report.n_W,
        reason="Wegscheider conditions satisfied",
    )
