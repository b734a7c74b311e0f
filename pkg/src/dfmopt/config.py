"""Run configuration: an INI-style text format with section headers.

Sections
--------
``[domain]``
    ``box_min``, ``box_max`` (three numbers), ``K`` (one number or nine),
    ``source`` (a value, see below) and ``bc.<face>`` for each face in
    ``xmin xmax ymin ymax zmin zmax`` as ``dirichlet <value>`` or
    ``neumann <value>``.  Faces left out are insulated.
``[fracture.<n>]``
    ``vertices`` as ``x y z`` triples separated by ``;``, ``K`` (one
    number or four), ``source`` and ``edge_bc`` as one condition per edge
    separated by ``;``.
``[generator]``
    ``seed``, ``count``, ``top_value``, ``bottom_value``; replaces the
    fracture list with a seeded random network.
``[numerics]``
    ``alpha``, ``beta``, ``delta_D``, ``delta_F_ratio``, ``gamma_ratio``,
    ``seg_ratio``, ``tol``, ``max_iter``, ``variant``.
``[output]``
    ``dir``, ``vtk`` (true/false) and ``exact`` (name of a builtin
    solution used for error norms, optional).

Values are a number, ``builtin:<name>`` for the analytic solution of a
built-in problem (its head for Dirichlet data and sources, its outward
flux for Neumann data) or ``poly:c0 cx cy cz cxx cxy cxz cyy cyz czz`` for
a polynomial of degree at most two (trailing coefficients may be omitted).
"""
from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DfmError
from .geometry import FACES, Dirichlet, Fracture, FractureNetwork, Neumann, PorousDomain
from .model import Parameters

MONOMIALS = ((0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1), (2, 0, 0), (1, 1, 0), (1, 0, 1), (0, 2, 0), (0, 1, 1), (0, 0, 2))
FACE_NORMALS = {
    "xmin": (-1, 0, 0), "xmax": (1, 0, 0),
    "ymin": (0, -1, 0), "ymax": (0, 1, 0),
    "zmin": (0, 0, -1), "zmax": (0, 0, 1),
}
VARIANTS = ("coupled", "beta_lagged")


def _builtins():
    from . import harness

    return {
        "problem1": (harness.problem1_value, harness.problem1_gradient, -1.0, -2.0),
        "problem2": (harness.problem2_value, harness.problem2_gradient, 0.0, 0.0),
    }


BUILTIN_NAMES = ("problem1", "problem2")


# ---------------------------------------------------------------------------
# Values and boundary conditions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValueSpec:
    """A scalar datum: ``const``, ``builtin`` or ``poly``."""

    kind: str = "const"
    constant: float = 0.0
    name: str = ""
    coeffs: tuple = ()

    def text(self) -> str:
        if self.kind == "builtin":
            return f"builtin:{self.name}"
        if self.kind == "poly":
            return "poly:" + " ".join(repr(float(c)) for c in self.coeffs)
        return repr(float(self.constant))

    def head(self):
        """Value as a float or a callable of points ``(N, 3)``."""
        if self.kind == "const":
            return self.constant
        if self.kind == "builtin":
            return _builtins()[self.name][0]
        coeffs = self.coeffs

        def poly(p):
            p = np.atleast_2d(p)
            out = np.zeros(len(p))
            for c, (a, b, e) in zip(coeffs, MONOMIALS):
                out += c * p[:, 0] ** a * p[:, 1] ** b * p[:, 2] ** e
            return out

        return poly

    def gradient(self):
        if self.kind == "const":
            return lambda p: np.zeros((len(np.atleast_2d(p)), 3))
        if self.kind == "builtin":
            return _builtins()[self.name][1]
        coeffs = self.coeffs

        def grad(p):
            p = np.atleast_2d(p)
            out = np.zeros((len(p), 3))
            for c, mono in zip(coeffs, MONOMIALS):
                for axis in range(3):
                    if mono[axis] == 0:
                        continue
                    lowered = list(mono)
                    lowered[axis] -= 1
                    term = c * mono[axis] * np.ones(len(p))
                    for k in range(3):
                        term = term * p[:, k] ** lowered[k]
                    out[:, axis] += term
            return out

        return grad

    def flux(self, normal):
        """Outward flux ``grad . n`` of the datum read as a head."""
        if self.kind == "const":
            return self.constant
        grad = self.gradient()
        n = np.asarray(normal, dtype=float)
        return lambda p: grad(p) @ n

    def source(self, on_fracture: bool):
        if self.kind == "builtin":
            return _builtins()[self.name][3 if on_fracture else 2]
        return self.head()


def parse_value(text: str) -> ValueSpec:
    text = text.strip()
    if text.startswith("builtin:"):
        name = text[len("builtin:"):].strip()
        if name not in BUILTIN_NAMES:
            raise ValueError(f"unknown builtin {name!r}; choose from {', '.join(BUILTIN_NAMES)}")
        return ValueSpec("builtin", name=name)
    if text.startswith("poly:"):
        coeffs = tuple(_floats(text[len("poly:"):]))
        if not 1 <= len(coeffs) <= len(MONOMIALS):
            raise ValueError(f"poly takes 1 to {len(MONOMIALS)} coefficients")
        return ValueSpec("poly", coeffs=coeffs)
    return ValueSpec("const", constant=_float(text))


@dataclass(frozen=True)
class BcSpec:
    kind: str
    value: ValueSpec = field(default_factory=ValueSpec)

    def text(self) -> str:
        return f"{self.kind} {self.value.text()}"

    def realise(self, normal):
        if self.kind == "dirichlet":
            return Dirichlet(self.value.head())
        return Neumann(self.value.flux(normal))


def parse_bc(text: str) -> BcSpec:
    parts = text.strip().split(None, 1)
    if not parts or parts[0].lower() not in ("dirichlet", "neumann"):
        raise ValueError("expected 'dirichlet <value>' or 'neumann <value>'")
    value = parse_value(parts[1]) if len(parts) > 1 else ValueSpec()
    return BcSpec(parts[0].lower(), value)


def _float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ValueError(f"{text.strip()!r} is not a number") from None
    if not math.isfinite(v):
        raise ValueError(f"{text.strip()!r} is not finite")
    return v


def _floats(text: str) -> list:
    return [_float(t) for t in text.replace(",", " ").split()]


# ---------------------------------------------------------------------------
# Configuration sections
# ---------------------------------------------------------------------------


@dataclass
class DomainSpec:
    box_min: tuple = (0.0, 0.0, 0.0)
    box_max: tuple = (1.0, 1.0, 1.0)
    K: tuple = (1.0,)
    source: ValueSpec = field(default_factory=ValueSpec)
    face_bc: dict = field(default_factory=dict)


@dataclass
class FractureSpec:
    id: int
    vertices: tuple
    K: tuple = (1.0,)
    source: ValueSpec = field(default_factory=ValueSpec)
    edge_bc: tuple = ()


@dataclass
class GeneratorSpec:
    seed: int = 0
    count: int = 20
    top_value: float = 1.0
    bottom_value: float = 0.0


@dataclass
class NumericsSpec:
    alpha: float = 1.0
    beta: float = 1.0
    delta_D: float = 0.25
    delta_F_ratio: float = 1.0
    gamma_ratio: float = 2.0
    seg_ratio: float = 2.0
    tol: float = 1e-8
    max_iter: int = 2000
    variant: str = "coupled"


@dataclass
class OutputSpec:
    dir: str = "out"
    vtk: bool = True
    exact: str = ""


@dataclass
class RunConfig:
    domain: DomainSpec = field(default_factory=DomainSpec)
    fractures: list = field(default_factory=list)
    generator: GeneratorSpec | None = None
    numerics: NumericsSpec = field(default_factory=NumericsSpec)
    output: OutputSpec = field(default_factory=OutputSpec)

    def parameters(self) -> Parameters:
        n = self.numerics
        return Parameters(n.delta_D, n.delta_F_ratio * n.delta_D, n.alpha, n.beta, n.gamma_ratio, n.seg_ratio)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


class _Locator:
    """Line numbers of section headers and keys in the source text."""

    def __init__(self, text: str):
        self.lines = {}
        section = None
        for no, line in enumerate(text.splitlines(), start=1):
            s = line.strip()
            m = re.match(r"\[(.+)\]$", s)
            if m:
                section = m.group(1).strip()
                self.lines[(section, None)] = no
                continue
            m = re.match(r"([^=:#\s][^=:]*?)\s*[=:]", s)
            if m and section is not None:
                self.lines.setdefault((section, m.group(1).strip().lower()), no)

    def where(self, section, key=None) -> str:
        no = self.lines.get((section, key)) or self.lines.get((section, None))
        loc = f"line {no}: " if no else ""
        return f"{loc}[{section}]" + (f" {key}" if key else "")


class _Reader:
    def __init__(self, parser, locator, source):
        self.p, self.loc, self.src = parser, locator, source

    def fail(self, section, key, msg):
        raise ConfigError(f"{self.src}: {self.loc.where(section, key)}: {msg}")

    def get(self, section, key, conv, default=None, required=False):
        if not self.p.has_option(section, key):
            if required:
                self.fail(section, key, "missing required field")
            return default
        raw = self.p.get(section, key)
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            self.fail(section, key, str(exc))

    def unknown(self, section, allowed):
        for key in self.p.options(section):
            if key not in allowed and not any(key.startswith(a) for a in allowed if a.endswith(".")):
                self.fail(section, key, "unknown field")


def _vec(n):
    def conv(text):
        v = _floats(text)
        if len(v) != n:
            raise ValueError(f"expected {n} numbers, got {len(v)}")
        return tuple(v)

    return conv


def _tensor(dim):
    def conv(text):
        v = _floats(text)
        if len(v) not in (1, dim * dim):
            raise ValueError(f"expected 1 or {dim * dim} numbers")
        return tuple(v)

    return conv


def _vertices(text):
    pts = [tuple(_floats(chunk)) for chunk in text.split(";") if chunk.strip()]
    if len(pts) < 3 or any(len(p) != 3 for p in pts):
        raise ValueError("expected at least three 'x y z' triples separated by ';'")
    return tuple(pts)


def _bc_list(text):
    return tuple(parse_bc(chunk) for chunk in text.split(";") if chunk.strip())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{text!r} is not a boolean")


def _int(text):
    try:
        return int(text.strip())
    except ValueError:
        raise ValueError(f"{text.strip()!r} is not an integer") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse configuration text; raises :class:`ConfigError` with line and field."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",), interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}: text before the first section header") from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}: duplicate section [{exc.section}]") from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}: [{exc.section}] {exc.option}: duplicate field") from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else "?"
        raise ConfigError(f"{source}: line {lineno}: malformed line") from None
    rd = _Reader(parser, _Locator(text), source)
    cfg = RunConfig()
    known = {"domain", "generator", "numerics", "output"}
    for sec in parser.sections():
        if sec not in known and not re.fullmatch(r"fracture\.\d+", sec):
            rd.fail(sec, None, "unknown section")
    if not parser.has_section("domain"):
        raise ConfigError(f"{source}: missing [domain] section")

    rd.unknown("domain", {"box_min", "box_max", "k", "source", "bc."})
    d = cfg.domain
    d.box_min = rd.get("domain", "box_min", _vec(3), required=True)
    d.box_max = rd.get("domain", "box_max", _vec(3), required=True)
    d.K = rd.get("domain", "k", _tensor(3), d.K)
    d.source = rd.get("domain", "source", parse_value, d.source)
    for key in parser.options("domain"):
        if key.startswith("bc."):
            face = key[3:]
            if face not in FACES:
                rd.fail("domain", key, f"unknown face; choose from {', '.join(FACES)}")
            d.face_bc[face] = rd.get("domain", key, parse_bc)

    fr_sections = sorted((s for s in parser.sections() if s.startswith("fracture.")), key=lambda s: int(s.split(".")[1]))
    for sec in fr_sections:
        rd.unknown(sec, {"vertices", "k", "source", "edge_bc"})
        verts = rd.get(sec, "vertices", _vertices, required=True)
        bcs = rd.get(sec, "edge_bc", _bc_list, ())
        if bcs and len(bcs) != len(verts):
            rd.fail(sec, "edge_bc", f"expected {len(verts)} conditions, one per edge")
        cfg.fractures.append(
            FractureSpec(
                int(sec.split(".")[1]), verts, rd.get(sec, "k", _tensor(2), (1.0,)),
                rd.get(sec, "source", parse_value, ValueSpec()), bcs,
            )
        )

    if parser.has_section("generator"):
        rd.unknown("generator", {"seed", "count", "top_value", "bottom_value"})
        if fr_sections:
            rd.fail("generator", None, "give either [generator] or [fracture.N] sections, not both")
        g = GeneratorSpec()
        g.seed = rd.get("generator", "seed", _int, g.seed)
        g.count = rd.get("generator", "count", _int, g.count)
        g.top_value = rd.get("generator", "top_value", _float, g.top_value)
        g.bottom_value = rd.get("generator", "bottom_value", _float, g.bottom_value)
        if g.count < 1:
            rd.fail("generator", "count", "must be at least 1")
        cfg.generator = g
    elif not fr_sections:
        raise ConfigError(f"{source}: no [fracture.N] sections and no [generator] section")

    n = cfg.numerics
    if parser.has_section("numerics"):
        rd.unknown("numerics", set(NumericsSpec.__dataclass_fields__) | {"delta_d", "delta_f_ratio"})
        n.alpha = rd.get("numerics", "alpha", _float, n.alpha)
        n.beta = rd.get("numerics", "beta", _float, n.beta)
        n.delta_D = rd.get("numerics", "delta_d", _float, n.delta_D)
        n.delta_F_ratio = rd.get("numerics", "delta_f_ratio", _float, n.delta_F_ratio)
        n.gamma_ratio = rd.get("numerics", "gamma_ratio", _float, n.gamma_ratio)
        n.seg_ratio = rd.get("numerics", "seg_ratio", _float, n.seg_ratio)
        n.tol = rd.get("numerics", "tol", _float, n.tol)
        n.max_iter = rd.get("numerics", "max_iter", _int, n.max_iter)
        n.variant = rd.get("numerics", "variant", str.strip, n.variant)
    for key in ("delta_D", "delta_F_ratio", "gamma_ratio", "seg_ratio", "tol"):
        if not getattr(n, key) > 0:
            rd.fail("numerics", key.lower(), "must be positive")
    if n.max_iter < 1:
        rd.fail("numerics", "max_iter", "must be at least 1")
    if n.variant not in VARIANTS:
        rd.fail("numerics", "variant", f"choose from {', '.join(VARIANTS)}")
    if n.alpha < 0:
        rd.fail("numerics", "alpha", "must be non-negative")
    if n.beta < 0:
        rd.fail("numerics", "beta", "must be non-negative")

    if parser.has_section("output"):
        rd.unknown("output", {"dir", "vtk", "exact"})
        o = cfg.output
        o.dir = rd.get("output", "dir", str.strip, o.dir)
        o.vtk = rd.get("output", "vtk", _bool, o.vtk)
        o.exact = rd.get("output", "exact", str.strip, o.exact)
        if o.exact and o.exact not in BUILTIN_NAMES:
            rd.fail("output", "exact", f"choose from {', '.join(BUILTIN_NAMES)}")
    _check_stability(cfg, rd)
    return cfg


def _check_stability(cfg: RunConfig, rd: _Reader) -> None:
    """alpha > 0 unless every fracture has a Dirichlet edge; beta > 0 without a Dirichlet face."""
    n = cfg.numerics
    if n.beta == 0 and not any(bc.kind == "dirichlet" for bc in cfg.domain.face_bc.values()):
        rd.fail("numerics", "beta", "must be positive when no box face is Dirichlet")
    if n.alpha == 0:
        if cfg.generator is not None:
            rd.fail("numerics", "alpha", "must be positive for generated networks")
        for f in cfg.fractures:
            if not any(bc.kind == "dirichlet" for bc in f.edge_bc):
                rd.fail("numerics", "alpha", f"must be positive: fracture.{f.id} has no Dirichlet edge")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


# ---------------------------------------------------------------------------
# Serialisation and realisation
# ---------------------------------------------------------------------------


def _nums(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def serialize_config(cfg: RunConfig) -> str:
    """Text that :func:`parse_config` maps back to an equal configuration."""
    d = cfg.domain
    lines = ["[domain]", f"box_min = {_nums(d.box_min)}", f"box_max = {_nums(d.box_max)}",
             f"K = {_nums(d.K)}", f"source = {d.source.text()}"]
    for face in FACES:
        if face in d.face_bc:
            lines.append(f"bc.{face} = {d.face_bc[face].text()}")
    for f in cfg.fractures:
        lines += ["", f"[fracture.{f.id}]", "vertices = " + "; ".join(_nums(v) for v in f.vertices),
                  f"K = {_nums(f.K)}", f"source = {f.source.text()}"]
        if f.edge_bc:
            lines.append("edge_bc = " + "; ".join(bc.text() for bc in f.edge_bc))
    if cfg.generator is not None:
        g = cfg.generator
        lines += ["", "[generator]", f"seed = {g.seed}", f"count = {g.count}",
                  f"top_value = {float(g.top_value)!r}", f"bottom_value = {float(g.bottom_value)!r}"]
    n = cfg.numerics
    lines += ["", "[numerics]", f"alpha = {float(n.alpha)!r}", f"beta = {float(n.beta)!r}", f"delta_D = {float(n.delta_D)!r}",
              f"delta_F_ratio = {float(n.delta_F_ratio)!r}", f"gamma_ratio = {float(n.gamma_ratio)!r}",
              f"seg_ratio = {float(n.seg_ratio)!r}", f"tol = {float(n.tol)!r}", f"max_iter = {n.max_iter}",
              f"variant = {n.variant}"]
    o = cfg.output
    lines += ["", "[output]", f"dir = {o.dir}", f"vtk = {'true' if o.vtk else 'false'}"]
    if o.exact:
        lines.append(f"exact = {o.exact}")
    return "\n".join(lines) + "\n"


def _tensor_value(values, dim):
    v = np.asarray(values, dtype=float)
    return float(v[0]) if v.size == 1 else v.reshape(dim, dim)


def _edge_normals(vertices: np.ndarray) -> list:
    c = vertices.mean(axis=0)
    out = []
    for k in range(len(vertices)):
        a, b = vertices[k], vertices[(k + 1) % len(vertices)]
        t = b - a
        # in-plane direction orthogonal to the edge, pointing away from the centroid
        r = (a + b) / 2 - c
        n = r - (r @ t) / (t @ t) * t
        out.append(n / np.linalg.norm(n))
    return out


def build_network(cfg: RunConfig) -> FractureNetwork:
    """Geometry and data objects described by ``cfg``."""
    from .harness import generate_random_dfn

    d = cfg.domain
    try:
        face_bc = {face: bc.realise(FACE_NORMALS[face]) for face, bc in d.face_bc.items()}
        domain = PorousDomain(d.box_min, d.box_max, _tensor_value(d.K, 3), face_bc, d.source.source(False))
        if cfg.generator is not None:
            g = cfg.generator
            return generate_random_dfn(g.seed, g.count, domain, top_value=g.top_value, bottom_value=g.bottom_value)
        fractures = []
        for k, f in enumerate(cfg.fractures):
            v = np.asarray(f.vertices, dtype=float)
            bcs = f.edge_bc or (BcSpec("neumann"),) * len(v)
            edge_bc = [bc.realise(n) for bc, n in zip(bcs, _edge_normals(v))]
            fractures.append(
                Fracture.from_vertices(k, v, _tensor_value(f.K, 2), edge_bc, f.source.source(True), domain.eps)
            )
        return FractureNetwork(domain, fractures)
    except ConfigError:
        raise
    except DfmError as exc:
        raise ConfigError(f"invalid geometry: {exc}") from None


def exact_solution(name: str):
    """Analytic head of a built-in problem as an ``AnalyticSolution``."""
    from .postprocess import AnalyticSolution

    value, gradient, _, _ = _builtins()[name]
    return AnalyticSolution(value, gradient)
