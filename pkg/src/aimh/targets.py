"""Built-in target distributions and the external-simulator evaluation protocol.

All targets expose log densities only; normalization constants are attached
when known analytically or computed by adaptive quadrature.
"""

from __future__ import annotations

import math
import selectors
import subprocess
import sys

import numpy as np
from scipy import integrate

from ._fastmath import diag_mixture_logpdf
from .core import Box, RealSpace, TargetDensity, NEG_INF

LOG_PI = math.log(math.pi)


# ---------------------------------------------------------------------------
# Sharp two-peak density on (0, 1)
# ---------------------------------------------------------------------------

def ex1_log_density(x: float, alpha: float) -> float:
    """Unnormalized log-density of the sharp two-peak target.

    4 * min{(x+2/3)^a, (4/3-x)^a} + min{(x+1/3)^a, (5/3-x)^a}, evaluated in
    log space so that exponents in the thousands stay finite.
    """
    if not 0.0 < x < 1.0:
        return NEG_INF
    m1 = alpha * min(math.log(x + 2.0 / 3.0), math.log(4.0 / 3.0 - x))
    m2 = alpha * min(math.log(x + 1.0 / 3.0), math.log(5.0 / 3.0 - x))
    a = math.log(4.0) + m1
    if a >= m2:
        return a + math.log1p(math.exp(m2 - a))
    return m2 + math.log1p(math.exp(a - m2))


def ex1_normalize(alpha: float) -> float:
    """Multiplicative constant making the two-peak density integrate to 1."""
    val, _ = integrate.quad(lambda x: math.exp(ex1_log_density(x, alpha)),
                            0.0, 1.0, points=[1.0 / 3.0, 2.0 / 3.0],
                            limit=400, epsabs=0.0, epsrel=1e-12)
    return 1.0 / val


class Example1Target(TargetDensity):
    """Two sharp peaks at 1/3 and 2/3 with 4:1 mass ratio, support (0, 1)."""

    modes = (1.0 / 3.0, 2.0 / 3.0)

    def __init__(self, alpha: float = 2000.0):
        self.alpha = float(alpha)
        c = ex1_normalize(self.alpha)
        self.c = c
        super().__init__(lambda x: ex1_log_density(x, self.alpha), dim=1,
                         support=Box(0.0, 1.0), log_norm_const=-math.log(c),
                         norm_tol=1e-10)
        self._grid: tuple[np.ndarray, np.ndarray] | None = None

    def log_density(self, x) -> float:
        return ex1_log_density(x, self.alpha)

    def cdf(self, t: float) -> float:
        """Exact (quadrature) CDF; the grid methods below are the fast path."""
        if t <= 0.0:
            return 0.0
        if t >= 1.0:
            return 1.0
        pts = [p for p in self.modes if p < t]
        val, _ = integrate.quad(
            lambda x: math.exp(ex1_log_density(x, self.alpha)), 0.0, t,
            points=pts or None, limit=400, epsabs=0.0, epsrel=1e-12)
        return val * self.c

    def _cdf_grid(self):
        # dense composite grid, refined around the sharp peaks
        if self._grid is None:
            parts = [np.linspace(0.0, 1.0, 4001)]
            for m in self.modes:
                parts.append(np.linspace(m - 0.02, m + 0.02, 100001))
            xs = np.unique(np.concatenate(parts))
            xs = xs[(xs >= 0.0) & (xs <= 1.0)]
            fs = np.array([math.exp(ex1_log_density(float(x), self.alpha))
                           for x in xs])
            cdf = integrate.cumulative_simpson(fs, x=xs, initial=0.0)
            cdf /= cdf[-1]
            self._grid = (xs, cdf)
        return self._grid

    def quantile(self, q: float) -> float:
        xs, cdf = self._cdf_grid()
        return float(np.interp(q, cdf, xs))

    def quantiles(self, m: int) -> np.ndarray:
        """Interior edges of m equiprobable cells."""
        xs, cdf = self._cdf_grid()
        return np.interp(np.arange(1, m) / m, cdf, xs)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Direct draws by inverse CDF on the dense grid."""
        xs, cdf = self._cdf_grid()
        return np.interp(rng.random(n), cdf, xs)


# ---------------------------------------------------------------------------
# Normal mixture in the plane
# ---------------------------------------------------------------------------

def gauss13_layout(r_inner: float = 0.05, r_outer: float = 1.5) -> np.ndarray:
    """Thirteen mode centers: origin, four at distance r_inner on the axes,
    and eight equally spaced on the circle of radius r_outer.

    The inner spacing keeps random walks between the central modes plausible
    while the outer gaps are far beyond per-mode scale; coordinates are fully
    configurable.
    """
    pts = [(0.0, 0.0),
           (r_inner, 0.0), (-r_inner, 0.0), (0.0, r_inner), (0.0, -r_inner)]
    for k in range(8):
        ang = 2.0 * math.pi * k / 8.0
        pts.append((r_outer * math.cos(ang), r_outer * math.sin(ang)))
    return np.array(pts)


class GaussMixtureTarget(TargetDensity):
    """Weighted normal mixture with diagonal covariances; normalized, so the
    log normalization constant is exactly zero."""

    def __init__(self, modes: np.ndarray | None = None,
                 weights: np.ndarray | None = None,
                 variances=0.01 ** 2):
        self.modes = np.asarray(modes if modes is not None else gauss13_layout(),
                                dtype=float)
        k, dim = self.modes.shape
        if weights is None:
            weights = np.full(k, 1.0 / k)
        self.weights = np.asarray(weights, dtype=float)
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")
        var = np.asarray(variances, dtype=float)
        if var.ndim == 0:
            var = np.full((k, dim), float(var))
        elif var.ndim == 1:
            var = np.tile(var, (k, 1))
        self.variances = var
        self._inv_var = 1.0 / var
        self._log_norm = (np.log(self.weights)
                          - 0.5 * np.sum(np.log(2.0 * math.pi * var), axis=1))
        self._stds = np.sqrt(var)
        super().__init__(self._log_mix, dim=dim, support=RealSpace(dim),
                         log_norm_const=0.0)

    def _log_mix(self, x) -> float:
        return float(diag_mixture_logpdf(np.asarray(x, dtype=float),
                                         self.modes, self._inv_var,
                                         self._log_norm, 0.0))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.choice(self.modes.shape[0], size=n, p=self.weights)
        return self.modes[comp] + self._stds[comp] * rng.standard_normal(
            (n, self.dim))


# ---------------------------------------------------------------------------
# Standard Cauchy
# ---------------------------------------------------------------------------

class CauchyTarget(TargetDensity):
    """Standard Cauchy; normalized, heavier-tailed than any normal proposal."""

    def __init__(self):
        super().__init__(self._log_cauchy, dim=1, support=RealSpace(1),
                         log_norm_const=0.0)

    @staticmethod
    def _log_cauchy(x: float) -> float:
        return -LOG_PI - math.log1p(x * x)

    def log_density(self, x) -> float:
        return self._log_cauchy(x)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.standard_cauchy(n)


def cauchy_quantile_bins(m: int) -> np.ndarray:
    """Edges t_k = tan(pi*k/(2m)) splitting |x| into m equally likely bins."""
    if m < 2:
        raise ValueError("need at least two bins")
    return np.tan(np.pi * np.arange(1, m) / (2.0 * m))


# ---------------------------------------------------------------------------
# Five-dimensional simulator calibration posterior
# ---------------------------------------------------------------------------

def ex4_f(x) -> float:
    """Smooth five-dimensional test response standing in for a simulator."""
    x = np.asarray(x, dtype=float)
    return float(3.0 * math.sin(x[0] * math.pi) - 0.5 * x[0]
                 + np.sum(np.sin(x[1:5] * (math.pi / 2.0))))


def ex4_log_likelihood(x, d: float, sigma2: float) -> float:
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0) or np.any(x >= 1.0):
        return NEG_INF
    r = ex4_f(x) - d
    return -r * r / sigma2


class Example4Target(TargetDensity):
    """Posterior over (0,1)^5 from a scalar response matched to a datum:
    log-likelihood -(f(x) - d)^2 / sigma2.

    ``evaluator`` computes the response (defaults to the built-in analytic
    form); it is called exactly once per ``evaluate`` and the response is
    returned as the cached auxiliary value.
    """

    def __init__(self, d: float = 2.5, sigma2: float = 0.005, evaluator=None):
        self.d = float(d)
        self.sigma2 = float(sigma2)
        self.evaluator = evaluator if evaluator is not None else ex4_f
        super().__init__(None, dim=5, support=Box(np.zeros(5), np.ones(5)))

    def evaluate(self, x):
        if not self.support.contains(x):
            return NEG_INF, None
        response = float(self.evaluator(x))
        r = response - self.d
        return -r * r / self.sigma2, response

    def log_density(self, x) -> float:
        # costs one evaluator call; the chain itself goes through evaluate()
        return self.evaluate(x)[0]


# ---------------------------------------------------------------------------
# External evaluation protocol
# ---------------------------------------------------------------------------

PROTOCOL_VERSION = 1


def _format_request(req_id: int, x: np.ndarray) -> str:
    coords = " ".join(repr(float(v)) for v in x)
    return f"EVAL {req_id} {x.size} {coords}\n"


class _LineReader:
    """Buffered line reader over a raw pipe with a select-based timeout."""

    def __init__(self, stream, timeout: float):
        self._stream = stream
        self._timeout = timeout
        self._buf = b""
        self._sel = selectors.DefaultSelector()
        self._sel.register(stream, selectors.EVENT_READ)

    def readline(self) -> str:
        while b"\n" not in self._buf:
            if not self._sel.select(self._timeout):
                raise TimeoutError("simulator timeout")
            if hasattr(self._stream, "read1"):
                chunk = self._stream.read1(65536)
            else:
                chunk = self._stream.read(65536)
            if not chunk:
                raise EOFError
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line.decode("utf-8")

    def close(self):
        self._sel.close()


class ExternalEvaluator:
    """Synchronous request/reply client for an external response server.

    Wire protocol (newline-delimited UTF-8, C-locale shortest round-trip
    floats): ``EVAL <id> <dim> <x1> ... <xdim>`` answered by ``OK <id>
    <value>`` or ``ERR <id> <message>``; the server prints ``READY 1`` on
    start.  Replies may arrive out of order and are matched by id.
    """

    def __init__(self, writer, reader, proc: subprocess.Popen | None = None,
                 timeout: float = 30.0, skip_handshake: bool = False):
        self._writer = writer
        self._reader = _LineReader(reader, timeout)
        self._proc = proc
        self._pending: dict[int, str] = {}
        self._next_id = 1
        if not skip_handshake:
            self._handshake()

    @classmethod
    def spawn(cls, argv: list[str], timeout: float = 30.0) -> "ExternalEvaluator":
        proc = subprocess.Popen(argv, stdin=subprocess.PIPE,
                                stdout=subprocess.PIPE, bufsize=0)
        return cls(proc.stdin, proc.stdout, proc=proc, timeout=timeout)

    def _handshake(self):
        line = self._read_line()
        parts = line.split()
        if len(parts) != 2 or parts[0] != "READY":
            raise RuntimeError(f"bad simulator handshake: {line!r}")
        if int(parts[1]) != PROTOCOL_VERSION:
            raise RuntimeError(f"unsupported simulator protocol {parts[1]}")

    def _read_line(self) -> str:
        try:
            return self._reader.readline()
        except EOFError:
            code = self._proc.poll() if self._proc is not None else None
            raise RuntimeError(
                f"simulator died (exit code {code})") from None
        except TimeoutError:
            raise RuntimeError("simulator timeout") from None

    def __call__(self, x) -> float:
        return self.evaluate(x)

    def evaluate(self, x) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        req_id = self._next_id
        self._next_id += 1
        self._writer.write(_format_request(req_id, x).encode("utf-8"))
        self._writer.flush()
        while True:
            if req_id in self._pending:
                return self._parse_reply(req_id, self._pending.pop(req_id))
            line = self._read_line()
            parts = line.split(maxsplit=2)
            if len(parts) < 2 or parts[0] not in ("OK", "ERR"):
                raise RuntimeError(f"malformed simulator reply: {line!r}")
            try:
                got_id = int(parts[1])
            except ValueError:
                raise RuntimeError(f"malformed simulator reply: {line!r}")
            if got_id == req_id:
                return self._parse_reply(req_id, line)
            self._pending[got_id] = line

    @staticmethod
    def _parse_reply(req_id: int, line: str) -> float:
        parts = line.split(maxsplit=2)
        if parts[0] == "ERR":
            msg = parts[2] if len(parts) > 2 else ""
            raise RuntimeError(f"simulator error for request {req_id}: {msg}")
        if len(parts) != 3:
            raise RuntimeError(f"malformed simulator reply: {line!r}")
        return float(parts[2])

    def close(self):
        self._reader.close()
        try:
            self._writer.close()
        except OSError:
            pass
        if self._proc is not None:
            self._proc.terminate()
            self._proc.wait(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def external_evaluate(evaluator: ExternalEvaluator, x) -> float:
    """Send one evaluation request and block for the matching reply."""
    return evaluator.evaluate(x)


def run_stub_simulator(stdin=None, stdout=None) -> int:
    """Serve the built-in five-dimensional response over the wire protocol."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    stdout.write(f"READY {PROTOCOL_VERSION}\n")
    stdout.flush()
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        req_id = "0"
        try:
            if parts[0] != "EVAL" or len(parts) < 3:
                raise ValueError("expected EVAL <id> <dim> <coords...>")
            req_id = parts[1]
            int(req_id)
            dim = int(parts[2])
            coords = [float(v) for v in parts[3:]]
            if len(coords) != dim:
                raise ValueError(f"expected {dim} coordinates, got {len(coords)}")
            if dim != 5:
                raise ValueError("response function is five-dimensional")
            value = ex4_f(np.array(coords))
            stdout.write(f"OK {req_id} {value!r}\n")
        except (ValueError, IndexError) as exc:
            stdout.write(f"ERR {req_id} {exc}\n")
        stdout.flush()
    return 0
