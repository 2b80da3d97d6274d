"""Reader for a subset of the OpenDSS circuit-description language.

Supported statements: ``New`` for Circuit, LineCode, Line, Transformer, Load
and Capacitor elements, plus ``Set``/``Solve`` (ignored).  Any other ``New``
class is skipped with a warning.  Everything is normalized on the way out:
line impedances in ohm per linecode length unit, powers in kW/kvar per phase.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field, replace

PHASES = ("A", "B", "C")

# metres per unit
LENGTH_UNITS = {
    "mi": 1609.344,
    "km": 1000.0,
    "kft": 304.8,
    "ft": 0.3048,
    "m": 1.0,
}

SUPPORTED_CLASSES = ("circuit", "linecode", "line", "transformer", "load", "capacitor", "regcontrol")
IGNORED_COMMANDS = ("set", "solve", "clear", "calcv", "calcvoltagebases", "buscoords", "redirect", "compile")


class DSSSyntaxError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CircuitError(ValueError):
    """Semantic error in an otherwise well-formed circuit file."""


# ---------------------------------------------------------------------------
# Lexer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Token:
    kind: str  # keyword, ident, number, '=', '.', '(', ')', '|', op, newline
    value: str
    line: int


KEYWORDS = {"new", "edit", "set", "solve", "clear", "redirect", "compile", "calcv", "calcvoltagebases", "buscoords", "more"}
BUS_KEYS = {"bus", "bus1", "bus2", "buses"}

_CHUNK = re.compile(r"[A-Za-z0-9_.%+\-]+")
_NUMBER = re.compile(r"[+-]?(\d+\.?\d*([eE][+-]?\d+)?|\.\d+([eE][+-]?\d+)?)$")


def _is_number(text: str) -> bool:
    return bool(_NUMBER.match(text))


def _split_dotted(chunk: str, line: int) -> list[Token]:
    out: list[Token] = []
    for i, part in enumerate(chunk.split(".")):
        if i:
            out.append(Token(".", ".", line))
        if part:
            out.append(Token("number" if _is_number(part) else "ident", part, line))
    return out


def tokenize(text: str) -> list[Token]:
    """Split circuit text into tokens.

    ``!`` and ``//`` start comments.  A line starting with ``~`` (or the word
    ``more``) continues the previous statement, so no newline token is
    emitted before it.  Brackets and quotes are treated as parentheses.
    """
    tokens: list[Token] = []
    depth = 0
    open_line = 0
    last_key: str | None = None
    lines = text.splitlines()
    for lineno, raw in enumerate(lines, start=1):
        body = raw.split("!", 1)[0].split("//", 1)[0]
        stripped = body.strip()
        if not stripped:
            continue
        continuation = stripped.startswith("~") or re.match(r"(?i)more\b", stripped) is not None
        if continuation:
            stripped = stripped[1:] if stripped.startswith("~") else stripped[4:]
        elif tokens:
            if depth:
                raise DSSSyntaxError("unterminated parenthesized literal", open_line)
            if tokens[-1].kind != "newline":
                tokens.append(Token("newline", "\n", lineno - 1))
        pos = 0
        n = len(stripped)
        while pos < n:
            ch = stripped[pos]
            if ch.isspace() or ch == ",":
                pos += 1
                continue
            if ch in "([":
                depth += 1
                open_line = lineno
                tokens.append(Token("(", ch, lineno))
                pos += 1
                continue
            if ch in ")]":
                if depth == 0:
                    raise DSSSyntaxError(f"unbalanced '{ch}'", lineno)
                depth -= 1
                tokens.append(Token(")", ch, lineno))
                pos += 1
                continue
            if ch in "\"'":
                # quoted value behaves like a parenthesized group
                end = stripped.find(ch, pos + 1)
                if end < 0:
                    raise DSSSyntaxError("unterminated quoted literal", lineno)
                inner = tokenize_group(stripped[pos + 1:end], lineno, last_key)
                tokens.append(Token("(", ch, lineno))
                tokens.extend(inner)
                tokens.append(Token(")", ch, lineno))
                pos = end + 1
                continue
            if ch == "=":
                tokens.append(Token("=", "=", lineno))
                pos += 1
                continue
            if ch == "|":
                tokens.append(Token("|", "|", lineno))
                pos += 1
                continue
            if ch in "/*":
                tokens.append(Token("op", ch, lineno))
                pos += 1
                continue
            m = _CHUNK.match(stripped, pos)
            if m is None:
                raise DSSSyntaxError(f"unexpected character {ch!r}", lineno)
            chunk = m.group(0)
            pos = m.end()
            nxt = stripped[pos:].lstrip()
            is_key = nxt.startswith("=")
            if chunk.lower() in KEYWORDS and (not tokens or tokens[-1].kind == "newline") and not is_key:
                tokens.append(Token("keyword", chunk.lower(), lineno))
                continue
            if is_key:
                last_key = chunk.lower()
                tokens.append(Token("ident", chunk, lineno))
                continue
            if last_key in BUS_KEYS or not _is_number(chunk):
                tokens.extend(_split_dotted(chunk, lineno))
            else:
                tokens.append(Token("number", chunk, lineno))
    if depth:
        raise DSSSyntaxError("unterminated parenthesized literal", open_line)
    if tokens and tokens[-1].kind != "newline":
        tokens.append(Token("newline", "\n", len(lines)))
    return tokens


def tokenize_group(text: str, lineno: int, last_key: str | None) -> list[Token]:
    out: list[Token] = []
    for piece in re.findall(r"[A-Za-z0-9_.%+\-]+|[|/*]", text):
        if piece == "|":
            out.append(Token("|", "|", lineno))
        elif piece in "/*":
            out.append(Token("op", piece, lineno))
        elif last_key in BUS_KEYS or not _is_number(piece):
            out.extend(_split_dotted(piece, lineno))
        else:
            out.append(Token("number", piece, lineno))
    return out


# ---------------------------------------------------------------------------
# Circuit records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BusRef:
    bus_name: str
    phases: tuple[int, ...]  # 1-based conductor order as written, e.g. (3, 2)

    def __post_init__(self):
        if not self.bus_name:
            raise CircuitError("empty bus name")
        if not self.phases:
            raise CircuitError(f"bus {self.bus_name}: no phases")
        if any(p not in (1, 2, 3) for p in self.phases) or len(set(self.phases)) != len(self.phases):
            raise CircuitError(f"bus {self.bus_name}: invalid phase indices {self.phases}")

    @property
    def phase_set(self) -> frozenset[str]:
        return frozenset(PHASES[p - 1] for p in self.phases)

    def __str__(self) -> str:
        return ".".join([self.bus_name, *map(str, self.phases)])


@dataclass(frozen=True)
class SourceDef:
    name: str
    bus: str
    base_kv: float
    pu: float = 1.0


@dataclass(frozen=True)
class LineCodeDef:
    name: str
    n_phases: int
    rmatrix: tuple[tuple[float, ...], ...]  # full symmetric, ohm per length unit
    xmatrix: tuple[tuple[float, ...], ...]
    length_unit: str = "none"

    def __post_init__(self):
        if not 1 <= self.n_phases <= 3:
            raise CircuitError(f"linecode {self.name}: nphases must be 1..3")
        for mat in (self.rmatrix, self.xmatrix):
            if len(mat) != self.n_phases or any(len(r) != self.n_phases for r in mat):
                raise CircuitError(f"linecode {self.name}: matrix dimension != nphases")
        if any(self.rmatrix[i][i] <= 0 for i in range(self.n_phases)):
            raise CircuitError(f"linecode {self.name}: diagonal resistance must be > 0")


@dataclass(frozen=True)
class LineDef:
    name: str
    bus1: BusRef
    bus2: BusRef
    linecode: str
    length: float
    length_unit: str = "none"


@dataclass(frozen=True)
class TransformerDef:
    name: str
    bus1: BusRef
    bus2: BusRef
    phases: int
    kv1: float
    kv2: float
    kva: float
    r_pu: float  # series impedance on the transformer's own rating
    x_pu: float
    tap_ratio: float = 1.0
    regulated: bool = False  # a RegControl names it, so its tap is a control input


@dataclass(frozen=True)
class LoadDef:
    name: str
    bus: BusRef
    p_kw: tuple[float, float, float]
    q_kvar: tuple[float, float, float]


@dataclass(frozen=True)
class CapacitorDef:
    name: str
    bus: BusRef
    q_kvar: tuple[float, float, float]
    initial_state: bool = True


@dataclass(frozen=True)
class CircuitSpec:
    source: SourceDef
    linecodes: tuple[LineCodeDef, ...] = ()
    lines: tuple[LineDef, ...] = ()
    transformers: tuple[TransformerDef, ...] = ()
    loads: tuple[LoadDef, ...] = ()
    capacitors: tuple[CapacitorDef, ...] = ()
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def linecode(self, name: str) -> LineCodeDef:
        for lc in self.linecodes:
            if lc.name == name:
                return lc
        raise CircuitError(f"dangling linecode reference {name!r}")

    def branch_buses(self) -> set[str]:
        names = {self.source.bus}
        for br in (*self.lines, *self.transformers):
            names.add(br.bus1.bus_name)
            names.add(br.bus2.bus_name)
        return names

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["schema"] = "circuit-spec/1"
        return doc


def line_impedance_ohm(spec: CircuitSpec, line: LineDef):
    """Series phase-impedance matrix of a line in ohm (complex ndarray)."""
    import numpy as np

    lc = spec.linecode(line.linecode)
    z = np.array(lc.rmatrix, dtype=float) + 1j * np.array(lc.xmatrix, dtype=float)
    return z * line.length * _unit_factor(line.length_unit, lc.length_unit)


def _unit_factor(line_unit: str, code_unit: str) -> float:
    if line_unit == "none" or code_unit == "none" or line_unit == code_unit:
        return 1.0
    return LENGTH_UNITS[line_unit] / LENGTH_UNITS[code_unit]


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _statements(tokens: list[Token]) -> list[list[Token]]:
    stmts, cur = [], []
    for tok in tokens:
        if tok.kind == "newline":
            if cur:
                stmts.append(cur)
            cur = []
        else:
            cur.append(tok)
    if cur:
        stmts.append(cur)
    return stmts


def _eval_group(toks: list[Token], raw: bool = False):
    """Parenthesized group -> float (RPN), flat list, or list of rows."""
    line = toks[0].line if toks else None
    if any(t.kind == "op" for t in toks):
        stack: list[float] = []
        for t in toks:
            if t.kind == "number":
                stack.append(float(t.value))
            elif t.kind == "op":
                if len(stack) < 2:
                    raise DSSSyntaxError("malformed RPN expression", line)
                b, a = stack.pop(), stack.pop()
                stack.append(a / b if t.value == "/" else a * b)
            else:
                raise DSSSyntaxError(f"unexpected {t.value!r} in RPN expression", line)
        if len(stack) != 1:
            raise DSSSyntaxError("malformed RPN expression", line)
        return stack[0]
    rows: list[list] = [[]]
    i = 0
    while i < len(toks):
        t = toks[i]
        if t.kind == "|":
            rows.append([])
            i += 1
            continue
        # glue dotted items (bus refs inside buses=(...))
        item = [t]
        while i + 2 < len(toks) and toks[i + 1].kind == ".":
            item.extend(toks[i + 1:i + 3])
            i += 2
        i += 1
        rows[-1].append(_item_value(item, raw))
    return rows if len(rows) > 1 else rows[0]


def _item_value(item: list[Token], raw: bool = False):
    if not raw and len(item) == 1 and item[0].kind == "number":
        return float(item[0].value)
    return "".join(t.value for t in item)


def _parse_props(toks: list[Token]) -> list[tuple[str, object, int]]:
    """key=value pairs in order; values are str, float or (nested) lists."""
    props = []
    i = 0
    while i < len(toks):
        t = toks[i]
        if t.kind != "ident" or i + 1 >= len(toks) or toks[i + 1].kind != "=":
            raise DSSSyntaxError(f"expected key=value, got {t.value!r}", t.line)
        key = t.value.lower()
        i += 2
        if i >= len(toks):
            raise DSSSyntaxError(f"missing value for {key}", t.line)
        if toks[i].kind == "(":
            depth, j = 0, i
            while True:
                if toks[j].kind == "(":
                    depth += 1
                elif toks[j].kind == ")":
                    depth -= 1
                    if depth == 0:
                        break
                j += 1
            value = _eval_group(toks[i + 1:j], raw=key in BUS_KEYS)
            i = j + 1
        else:
            j = i + 1
            while j < len(toks) and not (toks[j].kind == "ident" and j + 1 < len(toks) and toks[j + 1].kind == "="):
                j += 1
            value = _item_value(toks[i:j], raw=key in BUS_KEYS)
            i = j
        props.append((key, value, t.line))
    return props


def _busref(text, n_phases: int | None = None) -> BusRef:
    parts = str(text).split(".")
    name = parts[0].lower()
    if len(parts) > 1:
        try:
            phases = tuple(int(p) for p in parts[1:] if p != "0")
        except ValueError:
            raise CircuitError(f"bad terminal suffix in {text!r}") from None
    else:
        phases = tuple(range(1, (n_phases or 3) + 1))
    return BusRef(name, phases)


def _num(value, key: str, line: int) -> float:
    if isinstance(value, float):
        return value
    if isinstance(value, list) and len(value) == 1 and isinstance(value[0], float):
        return value[0]
    try:
        return float(value)
    except (TypeError, ValueError):
        raise DSSSyntaxError(f"{key}: expected a number, got {value!r}", line) from None


def _flag(value) -> bool:
    return str(value).lower() in ("y", "yes", "true", "t", "1", "1.0")


def _matrix(value, n: int, key: str, line: int) -> tuple[tuple[float, ...], ...]:
    """Lower-triangular (or full) matrix literal -> full symmetric rows."""
    rows = value if value and isinstance(value[0], list) else [value] if isinstance(value, list) else [[value]]
    rows = [[_num(v, key, line) for v in r] for r in rows]
    if len(rows) != n:
        raise CircuitError(f"line {line}: {key} has {len(rows)} rows, expected {n}")
    full = [[0.0] * n for _ in range(n)]
    for i, r in enumerate(rows):
        if len(r) == i + 1:
            for j, v in enumerate(r):
                full[i][j] = full[j][i] = v
        elif len(r) == n:
            full[i] = list(r)
        else:
            raise CircuitError(f"line {line}: {key} row {i + 1} has {len(r)} entries")
    return tuple(tuple(r) for r in full)


def _norm_unit(value) -> str:
    u = str(value).lower()
    if u in LENGTH_UNITS or u == "none":
        return u
    raise CircuitError(f"unsupported length unit {value!r}")


def _per_phase(bus: BusRef, total: float) -> tuple[float, float, float]:
    out = [0.0, 0.0, 0.0]
    share = total / len(bus.phases)
    for p in bus.phases:
        out[p - 1] = share
    return tuple(out)


def parse_file(text: str) -> CircuitSpec:
    """Parse circuit text into a validated :class:`CircuitSpec`."""
    tokens = tokenize(text)
    warnings: list[str] = []
    source = None
    linecodes: dict[str, LineCodeDef] = {}
    lines: dict[str, LineDef] = {}
    transformers: dict[str, TransformerDef] = {}
    loads: dict[str, LoadDef] = {}
    caps: dict[str, CapacitorDef] = {}
    implicit_codes: dict[str, LineCodeDef] = {}
    regulated: dict[str, int] = {}  # transformer name -> line of its RegControl

    for stmt in _statements(tokens):
        head = stmt[0]
        if head.kind != "keyword":
            raise DSSSyntaxError(f"expected a command, got {head.value!r}", head.line)
        if head.value in IGNORED_COMMANDS:
            if head.value in ("redirect", "compile", "buscoords"):
                warnings.append(f"line {head.line}: ignored command {head.value!r}")
            continue
        if head.value != "new":
            warnings.append(f"line {head.line}: unsupported command {head.value!r} skipped")
            continue
        rest = stmt[1:]
        if len(rest) >= 2 and rest[0].kind == "ident" and rest[0].value.lower() == "object" and rest[1].kind == "=":
            rest = rest[2:]
        if len(rest) < 3 or rest[1].kind != ".":
            raise DSSSyntaxError("expected Class.Name after New", head.line)
        cls = rest[0].value.lower()
        # element names may themselves contain dots
        j = 2
        name_parts = [rest[2].value]
        while j + 2 < len(rest) and rest[j + 1].kind == "." and rest[j + 2].kind in ("ident", "number"):
            if j + 3 < len(rest) and rest[j + 3].kind == "=":
                break
            name_parts.append(rest[j + 2].value)
            j += 2
        name = ".".join(name_parts).lower()
        props = _parse_props(rest[j + 1:])
        if cls not in SUPPORTED_CLASSES:
            warnings.append(f"line {head.line}: element class {cls!r} not supported, {cls}.{name} skipped")
            continue
        if cls == "regcontrol":
            regulated.setdefault(_regulated_transformer(name, props, head.line), head.line)
            continue
        registry = {"linecode": linecodes, "line": lines, "transformer": transformers,
                    "load": loads, "capacitor": caps}.get(cls)
        if registry is not None and name in registry:
            raise CircuitError(f"duplicate element name {cls}.{name}")

        if cls == "circuit":
            if source is not None:
                raise CircuitError("more than one Circuit definition")
            source = _parse_circuit(name, props)
        elif cls == "linecode":
            linecodes[name] = _parse_linecode(name, props, head.line)
        elif cls == "line":
            line, code = _parse_line(name, props, head.line)
            lines[name] = line
            if code is not None:
                implicit_codes[code.name] = code
        elif cls == "transformer":
            transformers[name] = _parse_transformer(name, props, head.line, warnings)
        elif cls == "load":
            loads[name] = _parse_load(name, props, head.line, warnings)
        else:
            caps[name] = _parse_capacitor(name, props, head.line)

    if source is None:
        raise CircuitError("missing 'New Circuit' statement")
    for code in implicit_codes.values():
        if code.name in linecodes:
            raise CircuitError(f"duplicate element name linecode.{code.name}")
        linecodes[code.name] = code
    for tname, lineno in regulated.items():
        if tname not in transformers:
            raise CircuitError(f"line {lineno}: regcontrol references unknown transformer {tname!r}")
        transformers[tname] = replace(transformers[tname], regulated=True)

    spec = CircuitSpec(
        source=source,
        linecodes=tuple(linecodes.values()),
        lines=tuple(lines.values()),
        transformers=tuple(transformers.values()),
        loads=tuple(loads.values()),
        capacitors=tuple(caps.values()),
        warnings=tuple(warnings),
    )
    validate(spec)
    return spec


def validate(spec: CircuitSpec) -> None:
    for line in spec.lines:
        lc = spec.linecode(line.linecode)
        if len(line.bus1.phases) != lc.n_phases or len(line.bus2.phases) != lc.n_phases:
            raise CircuitError(f"line {line.name}: {len(line.bus1.phases)} phases but linecode {lc.name} has {lc.n_phases}")
    for br in (*spec.lines, *spec.transformers):
        if br.bus1.phases != br.bus2.phases:
            raise CircuitError(f"{br.name}: terminal phases differ ({br.bus1} vs {br.bus2})")
        if br.bus1.bus_name == br.bus2.bus_name:
            raise CircuitError(f"{br.name}: both terminals on bus {br.bus1.bus_name}")
    known = spec.branch_buses()
    for el in (*spec.loads, *spec.capacitors):
        if el.bus.bus_name not in known:
            raise CircuitError(f"dangling bus {el.bus.bus_name!r} referenced by {el.name}")


def _parse_circuit(name: str, props) -> SourceDef:
    bus, base_kv, pu = "sourcebus", 115.0, 1.0
    for key, value, line in props:
        if key == "bus1":
            bus = str(value).split(".")[0].lower()
        elif key == "basekv":
            base_kv = _num(value, key, line)
        elif key == "pu":
            pu = _num(value, key, line)
    return SourceDef(name=name, bus=bus, base_kv=base_kv, pu=pu)


def _parse_linecode(name: str, props, lineno: int) -> LineCodeDef:
    kv = {k: (v, ln) for k, v, ln in props}
    n = int(_num(kv["nphases"][0], "nphases", lineno)) if "nphases" in kv else 3
    unit = _norm_unit(kv["units"][0]) if "units" in kv else "none"
    if "rmatrix" in kv:
        r = _matrix(kv["rmatrix"][0], n, "rmatrix", lineno)
        x = _matrix(kv["xmatrix"][0], n, "xmatrix", lineno) if "xmatrix" in kv else tuple(tuple(0.0 for _ in range(n)) for _ in range(n))
    else:
        r, x = _sequence_matrices(kv, n, lineno)
    return LineCodeDef(name=name, n_phases=n, rmatrix=r, xmatrix=x, length_unit=unit)


def _sequence_matrices(kv, n: int, lineno: int):
    """Phase matrices from r1/x1/r0/x0 sequence values."""
    def get(key, default):
        return _num(kv[key][0], key, lineno) if key in kv else default
    r1, x1 = get("r1", 0.058), get("x1", 0.1206)
    r0, x0 = get("r0", r1), get("x0", x1)
    if n == 1:
        return ((r1,),), ((x1,),)
    rs, rm = (2 * r1 + r0) / 3, (r0 - r1) / 3
    xs, xm = (2 * x1 + x0) / 3, (x0 - x1) / 3
    r = tuple(tuple(rs if i == j else rm for j in range(n)) for i in range(n))
    x = tuple(tuple(xs if i == j else xm for j in range(n)) for i in range(n))
    return r, x


def _parse_line(name: str, props, lineno: int):
    kv = {k: (v, ln) for k, v, ln in props}
    n = int(_num(kv["phases"][0], "phases", lineno)) if "phases" in kv else None
    if "bus1" not in kv or "bus2" not in kv:
        raise CircuitError(f"line {name}: bus1 and bus2 are required")
    b1 = _busref(kv["bus1"][0], n)
    b2 = _busref(kv["bus2"][0], n if n else len(b1.phases))
    length = _num(kv["length"][0], "length", lineno) if "length" in kv else 1.0
    unit = _norm_unit(kv["units"][0]) if "units" in kv else "none"
    code = None
    if "linecode" in kv:
        code_name = str(kv["linecode"][0]).lower()
    else:
        nph = len(b1.phases)
        if _flag(kv.get("switch", ("n",))[0]) and not any(k in kv for k in ("r1", "x1", "r0", "x0")):
            kv = {**kv, "r1": (1e-4, lineno), "x1": (0.0, lineno)}
        r, x = _sequence_matrices(kv, nph, lineno)
        if any(r[i][i] <= 0 for i in range(nph)):
            # a zero-resistance switch still needs a finite series element
            r = tuple(tuple(1e-4 if i == j else v for j, v in enumerate(row)) for i, row in enumerate(r))
        code_name = f"line.{name}"
        code = LineCodeDef(name=code_name, n_phases=nph, rmatrix=r, xmatrix=x, length_unit=unit)
    return LineDef(name=name, bus1=b1, bus2=b2, linecode=code_name, length=length, length_unit=unit), code


def _parse_transformer(name: str, props, lineno: int, warnings: list[str]) -> TransformerDef:
    phases = 3
    buses: list = [None, None]
    kvs = [12.47, 12.47]
    kvas = [1000.0, 1000.0]
    rs = [0.2, 0.2]  # percent
    taps = [1.0, 1.0]
    xhl = 7.0
    loadloss = None
    wdg = 0
    for key, value, line in props:
        if key == "phases":
            phases = int(_num(value, key, line))
        elif key == "windings":
            if int(_num(value, key, line)) != 2:
                raise CircuitError(f"transformer {name}: only 2-winding transformers are supported")
        elif key == "wdg":
            wdg = int(_num(value, key, line)) - 1
            if wdg not in (0, 1):
                raise CircuitError(f"transformer {name}: winding {wdg + 1} out of range")
        elif key == "bus":
            buses[wdg] = value
        elif key == "buses":
            buses = list(value)
        elif key == "kv":
            kvs[wdg] = _num(value, key, line)
        elif key == "kvs":
            kvs = [_num(v, key, line) for v in value]
        elif key == "kva":
            kvas[wdg] = _num(value, key, line)
        elif key == "kvas":
            kvas = [_num(v, key, line) for v in value]
        elif key == "%r":
            rs[wdg] = _num(value, key, line)
        elif key == "%rs":
            rs = [_num(v, key, line) for v in value]
        elif key == "tap":
            taps[wdg] = _num(value, key, line)
        elif key == "taps":
            taps = [_num(v, key, line) for v in value]
        elif key in ("xhl", "x12"):
            xhl = _num(value, key, line)
        elif key == "%loadloss":
            loadloss = _num(value, key, line)
        elif key in ("conn", "conns", "xht", "xlt", "sub", "basefreq", "%noloadloss", "%imag", "emergamps", "normamps"):
            continue
        else:
            warnings.append(f"line {line}: transformer {name}: property {key!r} ignored")
    if buses[0] is None or buses[1] is None:
        raise CircuitError(f"transformer {name}: both winding buses are required")
    r_pct = loadloss if loadloss is not None else rs[0] + rs[1]
    b1 = _busref(buses[0], phases)
    b2 = _busref(buses[1], phases)
    return TransformerDef(
        name=name, bus1=b1, bus2=b2, phases=len(b1.phases), kv1=kvs[0], kv2=kvs[1], kva=kvas[0],
        r_pu=r_pct / 100.0, x_pu=xhl / 100.0, tap_ratio=taps[1] / taps[0],
    )


def _regulated_transformer(name: str, props, lineno: int) -> str:
    # set points, bands and compensator settings describe automatic switching,
    # which is out of scope: the tap position is supplied as a control input
    for key, value, _ in props:
        if key == "transformer":
            return str(value).lower()
    raise CircuitError(f"line {lineno}: regcontrol {name}: transformer= is required")


def _parse_load(name: str, props, lineno: int, warnings: list[str]) -> LoadDef:
    kv = {k: (v, ln) for k, v, ln in props}
    n = int(_num(kv["phases"][0], "phases", lineno)) if "phases" in kv else 3
    if "bus1" not in kv:
        raise CircuitError(f"load {name}: bus1 is required")
    bus = _busref(kv["bus1"][0], n)
    kw = _num(kv["kw"][0], "kw", lineno) if "kw" in kv else 10.0
    if "kvar" in kv:
        kvar = _num(kv["kvar"][0], "kvar", lineno)
    else:
        pf = _num(kv["pf"][0], "pf", lineno) if "pf" in kv else 0.88
        kvar = math.copysign(kw * math.sqrt(max(0.0, 1.0 / pf**2 - 1.0)), pf)
    conn = str(kv.get("conn", ("wye",))[0]).lower()
    if conn in ("delta", "d", "ll"):
        warnings.append(f"load {name}: delta connection converted to an equivalent wye injection on phases {bus.phases}")
    return LoadDef(name=name, bus=bus, p_kw=_per_phase(bus, kw), q_kvar=_per_phase(bus, kvar))


def _parse_capacitor(name: str, props, lineno: int) -> CapacitorDef:
    kv = {k: (v, ln) for k, v, ln in props}
    n = int(_num(kv["phases"][0], "phases", lineno)) if "phases" in kv else 3
    if "bus1" not in kv:
        raise CircuitError(f"capacitor {name}: bus1 is required")
    bus = _busref(kv["bus1"][0], n)
    kvar = kv["kvar"][0] if "kvar" in kv else 600.0
    total = sum(_num(v, "kvar", lineno) for v in kvar) if isinstance(kvar, list) else _num(kvar, "kvar", lineno)
    on = True
    if "enabled" in kv:
        on = _flag(kv["enabled"][0])
    if "states" in kv:
        states = kv["states"][0]
        on = on and _flag(states[0] if isinstance(states, list) else states)
    return CapacitorDef(name=name, bus=bus, q_kvar=_per_phase(bus, total), initial_state=on)


def parse_path(path) -> CircuitSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_file(fh.read())


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def _total_for_split(per_phase: float, n: int) -> float:
    """A total that divides back to ``per_phase`` exactly."""
    total = per_phase * n
    for _ in range(64):
        if total / n == per_phase:
            return total
        total = math.nextafter(total, math.inf if total / n < per_phase else -math.inf)
    raise ValueError(f"cannot represent per-phase value {per_phase!r} over {n} phases")


def _phase_total(bus: BusRef, values, what: str) -> float:
    vals = {values[p - 1] for p in bus.phases}
    if len(vals) != 1 or any(values[i] != 0.0 for i in range(3) if i + 1 not in bus.phases):
        raise ValueError(f"{what}: unequal per-phase values cannot be written as one element")
    return _total_for_split(vals.pop(), len(bus.phases))


def _mat_literal(m) -> str:
    rows = [" ".join(_fmt(v) for v in row[: i + 1]) for i, row in enumerate(m)]
    return "(" + " | ".join(rows) + ")"


def to_dss(spec: CircuitSpec) -> str:
    """Write a CircuitSpec back as circuit text that reparses to an equal spec."""
    s = spec.source
    out = [f"New Circuit.{s.name} basekv={_fmt(s.base_kv)} pu={_fmt(s.pu)} phases=3 bus1={s.bus}"]
    for lc in spec.linecodes:
        out.append(f"New LineCode.{lc.name} nphases={lc.n_phases} units={lc.length_unit}")
        out.append(f"~ rmatrix={_mat_literal(lc.rmatrix)}")
        out.append(f"~ xmatrix={_mat_literal(lc.xmatrix)}")
    for ln in spec.lines:
        out.append(f"New Line.{ln.name} phases={len(ln.bus1.phases)} bus1={ln.bus1} bus2={ln.bus2} "
                   f"linecode={ln.linecode} length={_fmt(ln.length)} units={ln.length_unit}")
    for t in spec.transformers:
        half = t.r_pu * 100.0 / 2.0
        out.append(f"New Transformer.{t.name} phases={t.phases} windings=2 buses=({t.bus1} {t.bus2}) "
                   f"kvs=({_fmt(t.kv1)} {_fmt(t.kv2)}) kvas=({_fmt(t.kva)} {_fmt(t.kva)})")
        out.append(f"~ xhl={_fmt(t.x_pu * 100.0)} %rs=({_fmt(half)} {_fmt(half)}) taps=(1.0 {_fmt(t.tap_ratio)})")
        if t.regulated:
            out.append(f"New RegControl.{t.name} transformer={t.name} winding=2")
    for ld in spec.loads:
        kw = _phase_total(ld.bus, ld.p_kw, ld.name)
        kvar = _phase_total(ld.bus, ld.q_kvar, ld.name)
        out.append(f"New Load.{ld.name} bus1={ld.bus} phases={len(ld.bus.phases)} kW={_fmt(kw)} kvar={_fmt(kvar)}")
    for c in spec.capacitors:
        kvar = _phase_total(c.bus, c.q_kvar, c.name)
        out.append(f"New Capacitor.{c.name} bus1={c.bus} phases={len(c.bus.phases)} kvar={_fmt(kvar)} "
                   f"enabled={'yes' if c.initial_state else 'no'}")
    return "\n".join(out) + "\n"


def spec_to_json_text(spec: CircuitSpec) -> str:
    return json.dumps(spec.to_json(), indent=2)
