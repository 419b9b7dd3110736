"""Config files, solution files, iteration logs and trajectory dumps.

Configs are JSON objects with the matrices as row-major nested arrays under
their normative names (``A``, ``Abar``, ... ``Rbar``).  Every float this
module writes uses 17 significant digits, so files round-trip exactly and
identical inputs produce identical bytes.
"""

from __future__ import annotations

import dataclasses
import json
import math
import re
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, MflqError
from .gare import EPSILON, MAX_ITER, IterationRecord
from .model import SYSTEM_FIELDS, WEIGHT_FIELDS, CostWeights, FeedbackGain, MfSystem, RiccatiPair, check_pdc
from .rl import RlConfig, default_num_states
from .simulator import DECAY_RATIO, SimGrid, TrajectoryBundle

BUNDLE_MAGIC = "mflq-bundle 1"


class ConfigError(MflqError):
    """Unreadable or malformed input file; `line` points at the culprit when known."""

    exit_code = 1

    def __init__(self, message, path=None, line=None, field=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line
        self.field = field


# ---------------------------------------------------------------- emitting


def _fmt_float(x):
    x = float(x)
    if not math.isfinite(x):
        return "null"
    s = format(x, ".17g")
    # keep float syntax so that -0.0 survives a round trip
    return s if any(ch in s for ch in ".e") else s + ".0"


def dumps(obj, indent=None, _level=0):
    """JSON text with 17-significant-digit floats and ``nan``/``inf`` as null.

    Arrays are emitted as nested lists.  With `indent`, containers whose
    items are all scalars stay on one line, so matrices read row by row.
    """
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return "null" if obj is None else ("true" if obj else "false")
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (list, tuple)):
        items = [dumps(v, indent, _level + 1) for v in obj]
        flat = all(not isinstance(v, (list, tuple, dict, np.ndarray)) for v in obj)
        if indent is None or flat or not items:
            return "[" + ", ".join(items) + "]"
        pad = " " * (indent * (_level + 1))
        return "[\n" + ",\n".join(pad + s for s in items) + "\n" + " " * (indent * _level) + "]"
    if isinstance(obj, dict):
        items = [f"{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        if indent is None or not items:
            return "{" + ", ".join(items) + "}"
        pad = " " * (indent * (_level + 1))
        return "{\n" + ",\n".join(pad + s for s in items) + "\n" + " " * (indent * _level) + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_json(path, obj):
    write_text(path, dumps(obj, indent=2) + "\n")


# ---------------------------------------------------------------- config


@dataclass(frozen=True, eq=False)
class ProblemConfig:
    """Everything a command needs: model, weights, solver and simulation settings."""

    system: MfSystem
    weights: CostWeights
    rl: RlConfig
    gain0: FeedbackGain | None = None
    model_eps: float = EPSILON
    model_max_iter: int = MAX_ITER
    out: str = "out"
    initial_states: np.ndarray | None = None

    def __post_init__(self):
        if (self.system.n, self.system.m) != (self.weights.n, self.weights.m):
            raise DimensionError(
                f"system is (n={self.system.n}, m={self.system.m}) "
                f"but weights are (n={self.weights.n}, m={self.weights.m})"
            )
        if self.gain0 is not None and self.gain0.K.shape != (self.m, self.n):
            raise DimensionError(f"initial gain has shape {self.gain0.K.shape}, expected ({self.m}, {self.n})")
        if self.initial_states is not None:
            xs = np.atleast_2d(np.asarray(self.initial_states, dtype=float))
            if xs.shape[1] != self.n:
                raise DimensionError(f"initial states have {xs.shape[1]} components, expected {self.n}")
            object.__setattr__(self, "initial_states", xs)

    @property
    def n(self):
        return self.system.n

    @property
    def m(self):
        return self.system.m

    @property
    def grid(self) -> SimGrid:
        return self.rl.grid

    @property
    def seed(self) -> int:
        return self.rl.seed

    @property
    def pdc(self):
        return check_pdc(self.weights)

    def replace(self, **changes):
        """Copy with overrides; ``seed`` and ``grid`` are routed into the RL block."""
        rl_changes = {k: changes.pop(k) for k in ("seed", "grid") if k in changes}
        if rl_changes:
            changes["rl"] = dataclasses.replace(changes.get("rl", self.rl), **rl_changes)
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = {"n": self.n, "m": self.m}
        d.update({k: v for k, v in self.system.as_dict().items()})
        d.update({k: v for k, v in self.weights.as_dict().items()})
        d["initial_gain"] = None if self.gain0 is None else {"K": self.gain0.K, "Khat": self.gain0.Khat}
        d["grid"] = {"dt": self.grid.dt, "steps": self.grid.steps}
        d["model"] = {"epsilon": self.model_eps, "max_iter": self.model_max_iter}
        d["rl"] = {
            "N": self.rl.N,
            "H": self.rl.H,
            "epsilon": self.rl.eps,
            "max_iter": self.rl.max_iter,
            "state_range": list(self.rl.state_range),
            "decay_ratio": self.rl.decay_ratio,
        }
        d["initial_states"] = self.initial_states
        d["seed"] = self.seed
        d["out"] = self.out
        return d

    def __eq__(self, other):
        if not isinstance(other, ProblemConfig):
            return NotImplemented
        return dumps(self.to_dict()) == dumps(other.to_dict())


def _line_of(text, key):
    if text is None:
        return None
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


class _Reader:
    def __init__(self, data, path=None, text=None):
        self.data = data
        self.path = path
        self.text = text

    def fail(self, msg, key):
        raise ConfigError(f"field '{key}': {msg}", self.path, _line_of(self.text, key.split(".")[-1]), key)

    def matrix(self, src, key, shape, default_zero=True, prefix=""):
        full = prefix + key
        if key not in src or src[key] is None:
            if default_zero:
                return np.zeros(shape)
            self.fail("is required", full)
        try:
            arr = np.array(src[key], dtype=float)
        except (TypeError, ValueError):
            self.fail("must be a number or a nested array of numbers", full)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1 and shape[0] == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim == 1 and shape[1] == 1:
            arr = arr.reshape(-1, 1)
        if arr.shape != shape:
            raise DimensionError(
                f"{self.path or 'config'}:{_line_of(self.text, key) or '?'}: field '{full}' "
                f"has shape {arr.shape}, expected {shape}"
            )
        if not np.all(np.isfinite(arr)):
            self.fail("contains non-finite entries", full)
        return arr

    def number(self, src, key, default, kind=float, prefix=""):
        v = src.get(key, default)
        if v is None:
            return default
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(f"must be a number, got {v!r}", prefix + key)
        if kind is int:
            if isinstance(v, int):
                return v
            if not float(v).is_integer():
                self.fail(f"must be an integer, got {v!r}", prefix + key)
            return int(v)
        return float(v)

    def section(self, key):
        v = self.data.get(key, {})
        if v is None:
            return {}
        if not isinstance(v, dict):
            self.fail("must be an object", key)
        return v


def config_from_dict(data, path=None, text=None) -> ProblemConfig:
    if not isinstance(data, dict):
        raise ConfigError("top level must be an object", path, 1)
    rd = _Reader(data, path, text)
    known = set(SYSTEM_FIELDS + WEIGHT_FIELDS) | {
        "n", "m", "initial_gain", "grid", "model", "rl", "initial_states", "seed", "out",
    }
    for key in data:
        if key not in known:
            rd.fail("unknown field", key)

    if "A" not in data or "B" not in data:
        rd.fail("is required", "A" if "A" not in data else "B")
    try:
        A = np.atleast_2d(np.array(data["A"], dtype=float))
        B = np.atleast_2d(np.array(data["B"], dtype=float))
    except (TypeError, ValueError):
        rd.fail("must be a number or a nested array of numbers", "A/B")
    n = rd.number(data, "n", A.shape[0], int)
    m = rd.number(data, "m", B.shape[1] if B.shape[0] == n else B.size // max(n, 1), int)
    if n < 1 or m < 1:
        rd.fail("dimensions must be positive", "n" if n < 1 else "m")
    nn, nm, mn, mm = (n, n), (n, m), (m, n), (m, m)
    shapes = {"A": nn, "Abar": nn, "B": nm, "Bbar": nm, "C": nn, "Cbar": nn, "D": nm, "Dbar": nm}
    sys = MfSystem(**{k: rd.matrix(data, k, s, default_zero=k not in ("A", "B")) for k, s in shapes.items()})
    wshapes = {"Q": nn, "Qbar": nn, "S": mn, "Sbar": mn, "R": mm, "Rbar": mm}
    w = CostWeights(**{k: rd.matrix(data, k, s, default_zero=k not in ("Q", "R")) for k, s in wshapes.items()})

    gain0 = None
    g = data.get("initial_gain")
    if g is not None:
        if not isinstance(g, dict):
            rd.fail("must be an object with K and Khat", "initial_gain")
        K = rd.matrix(g, "K", mn, default_zero=False, prefix="initial_gain.")
        Kh = rd.matrix(g, "Khat", mn, default_zero=False, prefix="initial_gain.")
        gain0 = FeedbackGain(K, Kh)

    gs, ms, rs = rd.section("grid"), rd.section("model"), rd.section("rl")
    try:
        grid = SimGrid(dt=rd.number(gs, "dt", 0.01, prefix="grid."), steps=rd.number(gs, "steps", 2000, int, prefix="grid."))
    except ValueError as exc:
        rd.fail(str(exc), "grid")
    seed = rd.number(data, "seed", 0, int)
    if seed < 0:
        rd.fail("must be a non-negative integer", "seed")
    srange = rs.get("state_range", [0.0, 20.0])
    if not (isinstance(srange, list) and len(srange) == 2):
        rd.fail("must be a two-element list", "rl.state_range")
    try:
        rl = RlConfig(
            N=rd.number(rs, "N", default_num_states(n), int, prefix="rl."),
            H=rd.number(rs, "H", 100_000, int, prefix="rl."),
            grid=grid,
            eps=rd.number(rs, "epsilon", 1e-3, prefix="rl."),
            max_iter=rd.number(rs, "max_iter", 100, int, prefix="rl."),
            seed=seed,
            state_range=(float(srange[0]), float(srange[1])),
            decay_ratio=rd.number(rs, "decay_ratio", DECAY_RATIO, prefix="rl."),
        )
    except ValueError as exc:
        rd.fail(str(exc), "rl")
    out = data.get("out", "out")
    if not isinstance(out, str):
        rd.fail("must be a string", "out")
    xs = data.get("initial_states")
    if xs is not None:
        try:
            xs = np.atleast_2d(np.array(xs, dtype=float))
        except (TypeError, ValueError):
            rd.fail("must be a list of states", "initial_states")
    return ProblemConfig(
        system=sys,
        weights=w,
        rl=rl,
        gain0=gain0,
        model_eps=rd.number(ms, "epsilon", EPSILON, prefix="model."),
        model_max_iter=rd.number(ms, "max_iter", MAX_ITER, int, prefix="model."),
        out=out,
        initial_states=xs,
    )


def load_config(path) -> ProblemConfig:
    """Read and validate a JSON problem config.

    Asymmetric weights are symmetrized with a warning.  A violated
    positive-definiteness condition is reported as a warning only; the
    solvers check it again.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", path, exc.lineno) from exc
    cfg = config_from_dict(data, path, text)
    pdc = cfg.pdc
    if not pdc:
        warnings.warn(
            f"{path}: cost weights violate the positive-definiteness condition "
            f"(min eig R-block {pdc.min_eig_R:.3g}, Schur complement {pdc.min_eig_schur:.3g})",
            stacklevel=2,
        )
    return cfg


def write_config(cfg: ProblemConfig, path):
    write_json(path, cfg.to_dict())


# ---------------------------------------------------------------- solutions


def _read_json(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read file: {exc.strerror}", path) from exc
    try:
        return json.loads(text), text
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", path, exc.lineno) from exc


def load_pair(path, n) -> RiccatiPair:
    data, text = _read_json(path)
    rd = _Reader(data, path, text)
    return RiccatiPair(rd.matrix(data, "P", (n, n), False), rd.matrix(data, "Phat", (n, n), False))


def load_gain(path, m, n) -> FeedbackGain:
    data, text = _read_json(path)
    rd = _Reader(data, path, text)
    return FeedbackGain(rd.matrix(data, "K", (m, n), False), rd.matrix(data, "Khat", (m, n), False))


def solution_dict(pair: RiccatiPair, gain: FeedbackGain, **extra):
    d = {"P": pair.P, "Phat": pair.Phat, "K": gain.K, "Khat": gain.Khat}
    d.update(extra)
    return d


# ---------------------------------------------------------------- iteration logs

HISTORY_COLUMNS = ("iteration", "deltaP", "deltaPhat", "residP", "residPhat")


def record_dict(rec: IterationRecord):
    return {
        "type": "iteration",
        "iteration": rec.index,
        "deltaP": rec.delta_P,
        "deltaPhat": rec.delta_Phat,
        "residP": rec.resid_P,
        "residPhat": rec.resid_Phat,
        "P": rec.pair.P,
        "Phat": rec.pair.Phat,
        "K": rec.gain.K,
        "Khat": rec.gain.Khat,
    }


def history_csv_row(rec: IterationRecord):
    vals = (rec.delta_P, rec.delta_Phat, rec.resid_P, rec.resid_Phat)
    return ",".join([str(rec.index)] + [format(float(v), ".17g") for v in vals])


class HistoryWriter:
    """Streams iteration records to a JSON-lines file and a CSV as they arrive."""

    def __init__(self, out_dir, stem="history"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.jsonl_path = out / f"{stem}.jsonl"
        self.csv_path = out / f"{stem}.csv"
        self._jsonl = open(self.jsonl_path, "w", encoding="utf-8", newline="\n")
        self._csv = open(self.csv_path, "w", encoding="utf-8", newline="\n")
        self._csv.write(",".join(HISTORY_COLUMNS) + "\n")

    def __call__(self, rec: IterationRecord):
        self._jsonl.write(dumps(record_dict(rec)) + "\n")
        self._csv.write(history_csv_row(rec) + "\n")
        self._jsonl.flush()
        self._csv.flush()

    def summary(self, **fields):
        self._jsonl.write(dumps({"type": "summary", **fields}) + "\n")

    def close(self):
        self._jsonl.close()
        self._csv.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_history(path):
    """Parse a JSON-lines history into (iteration records as dicts, summary or None)."""
    records, summary = [], None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            if d.get("type") == "summary":
                summary = d
            else:
                records.append(d)
    return records, summary


# ---------------------------------------------------------------- trajectories


def write_mean_csv(bundle: TrajectoryBundle, path):
    n = bundle.mean_path.shape[1]
    lines = [",".join(["time"] + [f"x{i + 1}" for i in range(n)])]
    for t, row in zip(bundle.grid.times, bundle.mean_path):
        lines.append(",".join(format(float(v), ".17g") for v in (t, *row)))
    write_text(path, "\n".join(lines) + "\n")


def write_bundle(bundle: TrajectoryBundle, path):
    """Columnar dump: header lines, then one row ``path step x1..xn`` per (path, step).

    Rows are ordered by path, then by step.  Without stored paths only the
    header and the per-step mean rows (path index ``-1``) are written.
    """
    n, L = bundle.mean_path.shape[1], bundle.grid.steps
    header = [
        f"# {BUNDLE_MAGIC}",
        f"# n {n}",
        f"# H {bundle.H}",
        f"# L {L}",
        f"# dt {format(bundle.grid.dt, '.17g')}",
        f"# seed {bundle.seed}",
        "# x0 " + " ".join(format(float(v), ".17g") for v in bundle.x0),
        "# columns path step " + " ".join(f"x{i + 1}" for i in range(n)),
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(header) + "\n")
        if bundle.paths is None:
            blocks = [(-1, bundle.mean_path)]
        else:
            blocks = enumerate(bundle.paths)
        for h, traj in blocks:
            for l, row in enumerate(traj):
                fh.write(f"{h} {l} " + " ".join(format(float(v), ".17g") for v in row) + "\n")


def read_bundle(path):
    """Read a file written by :func:`write_bundle`; returns (header dict, array)."""
    header = {}
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
        if first != f"# {BUNDLE_MAGIC}":
            raise ConfigError("not a trajectory bundle file", path, 1)
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, val = line[2:].strip().partition(" ")
            header[key] = val
    n, H, L = int(header["n"]), int(header["H"]), int(header["L"])
    meta = {
        "n": n,
        "H": H,
        "L": L,
        "dt": float(header["dt"]),
        "seed": int(header["seed"]),
        "x0": np.array([float(v) for v in header["x0"].split()]),
    }
    body = np.loadtxt(path, comments="#", ndmin=2)
    rows = body.shape[0]
    k = rows // (L + 1)
    data = body[:, 2:].reshape(k, L + 1, n)
    return meta, data
