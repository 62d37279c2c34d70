"""Function-call-graph data model, validation, normalization, and interchange I/O.

The interchange format is newline-delimited JSON, one graph per line:

    {"graph_id": "...", "label": "malware"|"benign"|null, "main": "...",
     "nodes": [{"id": "...", "apis": [...], "strings": [...]}, ...],
     "edges": [["caller", "callee"], ...]}

All types are immutable after construction and safe to share across workers.
"""

import json
import logging
from dataclasses import dataclass, field

logger = logging.getLogger("mal2gcn")

LABEL_MALWARE = "malware"
LABEL_BENIGN = "benign"

_RECORD_KEYS = {"graph_id", "label", "main", "nodes", "edges"}
_NODE_KEYS = {"id", "apis", "strings"}


class DataError(Exception):
    """Input violates a data contract (bad label, unknown id, empty corpus, ...)."""


class FormatError(DataError):
    """An interchange or report file is malformed."""


@dataclass(frozen=True)
class FunctionNode:
    """One function: its id, the API names it calls, and the strings it references.

    Token lists keep duplicates and original case; normalization happens at
    featurization time.
    """

    id: str
    apis: tuple[str, ...] = ()
    strings: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "apis", tuple(self.apis))
        object.__setattr__(self, "strings", tuple(self.strings))

    @property
    def token_count(self) -> int:
        return len(self.apis) + len(self.strings)


@dataclass(frozen=True)
class Fcg:
    """A labeled directed function call graph; edge (a, b) means a calls b."""

    graph_id: str
    label: str | None
    main_id: str
    nodes: tuple[FunctionNode, ...]
    edges: tuple[tuple[str, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple((a, b) for a, b in self.edges))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def total_token_count(self) -> int:
        return sum(node.token_count for node in self.nodes)

    def node_ids(self) -> tuple[str, ...]:
        return tuple(node.id for node in self.nodes)


@dataclass(frozen=True)
class Corpus:
    """Ordered graph collection plus free-form provenance metadata."""

    records: tuple[Fcg, ...]
    provenance: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


@dataclass(frozen=True)
class ValidationResult:
    errors: tuple[str, ...]
    warnings: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.errors


def validate_fcg(g: Fcg) -> ValidationResult:
    """Check structural invariants; isolation is a warning because normalize_fcg repairs it."""
    errors: list[str] = []
    warnings: list[str] = []

    seen: set[str] = set()
    for node in g.nodes:
        if not node.id:
            errors.append("empty node id")
        elif node.id in seen:
            errors.append(f"duplicate id {node.id}")
        seen.add(node.id)

    if g.main_id not in seen:
        errors.append(f"main id {g.main_id} is not a node")

    if g.label is not None and g.label not in (LABEL_MALWARE, LABEL_BENIGN):
        errors.append(f"invalid label {g.label!r}")

    touched: set[str] = set()
    for caller, callee in g.edges:
        for endpoint in (caller, callee):
            if endpoint not in seen:
                errors.append(f"unknown edge endpoint {endpoint}")
        if caller != callee:
            touched.add(caller)
            touched.add(callee)

    for node in g.nodes:
        if node.id != g.main_id and node.id not in touched:
            warnings.append(f"isolated node {node.id}")

    return ValidationResult(tuple(errors), tuple(warnings))


def normalize_fcg(g: Fcg) -> Fcg:
    """Return a structurally canonical copy of the graph.

    Drops self-edges, deduplicates edges (first occurrence wins), and gives
    every otherwise isolated non-main node an edge main -> node so that it
    participates in neighborhood aggregation.  Idempotent.
    """
    result = validate_fcg(g)
    if not result.ok:
        raise DataError(f"graph {g.graph_id}: " + "; ".join(result.errors))

    edges: list[tuple[str, str]] = []
    seen_edges: set[tuple[str, str]] = set()
    touched: set[str] = set()
    for edge in g.edges:
        caller, callee = edge
        if caller == callee or edge in seen_edges:
            continue
        seen_edges.add(edge)
        edges.append(edge)
        touched.add(caller)
        touched.add(callee)

    for node in g.nodes:
        if node.id != g.main_id and node.id not in touched:
            edges.append((g.main_id, node.id))

    return Fcg(g.graph_id, g.label, g.main_id, g.nodes, tuple(edges))


# ---------------------------------------------------------------------------
# Interchange format
# ---------------------------------------------------------------------------


def _check_keys(obj: dict, allowed: set[str], where: str, strict: bool) -> None:
    unknown = set(obj) - allowed
    if unknown:
        names = ", ".join(sorted(unknown))
        if strict:
            raise FormatError(f"{where}: unknown field(s) {names}")
        logger.warning("%s: ignoring unknown field(s) %s", where, names)


def record_to_fcg(obj: dict, where: str = "record", strict: bool = True) -> Fcg:
    """Decode one interchange object into an Fcg, checking field names and types."""
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: expected an object")
    _check_keys(obj, _RECORD_KEYS, where, strict)
    missing = _RECORD_KEYS - set(obj)
    if missing:
        raise FormatError(f"{where}: missing field(s) {', '.join(sorted(missing))}")

    label = obj["label"]
    if label is not None and label not in (LABEL_MALWARE, LABEL_BENIGN):
        raise FormatError(f"{where}: label must be 'malware', 'benign', or null")

    if not isinstance(obj["nodes"], list) or not isinstance(obj["edges"], list):
        raise FormatError(f"{where}: nodes and edges must be arrays")

    nodes = []
    for k, node_obj in enumerate(obj["nodes"]):
        node_where = f"{where} node {k}"
        if not isinstance(node_obj, dict):
            raise FormatError(f"{node_where}: expected an object")
        _check_keys(node_obj, _NODE_KEYS, node_where, strict)
        if _NODE_KEYS - set(node_obj):
            raise FormatError(f"{node_where}: missing field(s)")
        if not isinstance(node_obj["id"], str):
            raise FormatError(f"{node_where}: id must be a string")
        for key in ("apis", "strings"):
            tokens = node_obj[key]
            if not isinstance(tokens, list) or any(not isinstance(t, str) for t in tokens):
                raise FormatError(f"{node_where}: {key} must be an array of strings")
        nodes.append(FunctionNode(node_obj["id"], tuple(node_obj["apis"]), tuple(node_obj["strings"])))

    edges = []
    for k, pair in enumerate(obj["edges"]):
        if not isinstance(pair, list) or len(pair) != 2 or any(not isinstance(e, str) for e in pair):
            raise FormatError(f"{where} edge {k}: expected a [caller, callee] string pair")
        edges.append((pair[0], pair[1]))

    if not isinstance(obj["graph_id"], str) or not isinstance(obj["main"], str):
        raise FormatError(f"{where}: graph_id and main must be strings")

    return Fcg(obj["graph_id"], label, obj["main"], tuple(nodes), tuple(edges))


def fcg_to_record(g: Fcg) -> dict:
    return {
        "graph_id": g.graph_id,
        "label": g.label,
        "main": g.main_id,
        "nodes": [{"id": n.id, "apis": list(n.apis), "strings": list(n.strings)} for n in g.nodes],
        "edges": [[a, b] for a, b in g.edges],
    }


def write_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in corpus.records:
            fh.write(json.dumps(fcg_to_record(g), ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def read_corpus(path, strict: bool = True) -> Corpus:
    """Read an interchange file; every record must pass validation (isolation aside)."""
    records: list[Fcg] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path} line {lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{where}: invalid JSON ({exc.msg})") from exc
            g = record_to_fcg(obj, where=where, strict=strict)
            result = validate_fcg(g)
            if not result.ok:
                raise FormatError(f"{where} (graph {g.graph_id}): " + "; ".join(result.errors))
            records.append(g)
    return Corpus(tuple(records), {"source": str(path)})
