"""In-memory quad store and the query evaluator used by rule where-clauses.

Queries are lists of clauses applied left to right over a set of frames
(variable bindings): graph patterns, OPTIONAL blocks, BIND expressions,
comparison filters, and NOT-EXISTS guards. Concept-scoped patterns are
resolved against a namespace table so a rule can say `User: { ?u name: ?n }`
without knowing graph IRIs. Results are deduplicated and sorted so a query
over the same store always returns the same frame list.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass

from tandem.core import NIL, Nil, Quad, Ref, new_id, value_key, values_equal


class QueryError(Exception):
    pass


class GroupingError(Exception):
    pass


@dataclass(frozen=True)
class Var:
    name: str  # keeps the leading "?"

    def __post_init__(self) -> None:
        if not self.name.startswith("?") or len(self.name) < 2:
            raise QueryError(f"variable names start with '?': {self.name!r}")


def is_var(term) -> bool:
    return isinstance(term, Var)


@dataclass(frozen=True)
class Namespace:
    """Where a concept's state lives: its graph plus its predicate base."""

    graph: str
    base: str

    def predicate(self, prop: str) -> str:
        return self.base + "/" + prop


@dataclass(frozen=True)
class ConceptPattern:
    concept: str
    triples: tuple  # (subject term, property name, object term)


@dataclass(frozen=True)
class GraphPattern:
    graph: str
    triples: tuple  # (subject term, predicate iri, object term)


@dataclass(frozen=True)
class FuncCall:
    name: str  # "uuid" or "coalesce"
    args: tuple = ()


@dataclass(frozen=True)
class Bind:
    expr: object
    target: str  # variable name with "?"


@dataclass(frozen=True)
class Compare:
    left: object
    op: str  # == != < <= > >=
    right: object


@dataclass(frozen=True)
class OptionalBlock:
    clauses: tuple


@dataclass(frozen=True)
class NotExists:
    clauses: tuple


@dataclass(frozen=True)
class Query:
    clauses: tuple = ()


EACHTHEN = "?_eachthen"


def has_eachthen(query: Query | None) -> bool:
    if query is None:
        return False
    return any(isinstance(c, Bind) and c.target == EACHTHEN for c in query.clauses)


def frame_key(frame: dict):
    return tuple(sorted((v, value_key(val)) for v, val in frame.items()))


_ATOMS = (str, int, bool, Ref, Nil)


class QuadStore:
    """Set of quads with per-graph indexes. Writes are serialized by a lock."""

    def __init__(self) -> None:
        self._lock = threading.RLock()
        # graph -> subject -> predicate -> {value_key: object}
        self._spo: dict[str, dict[str, dict[str, dict]]] = {}
        # graph -> predicate -> value_key -> (object, set of subjects)
        self._pos: dict[str, dict[str, dict]] = {}
        self._count = 0

    def insert(self, quads) -> int:
        added = 0
        with self._lock:
            for q in quads:
                if not isinstance(q.object, _ATOMS):
                    raise ValueError(f"quad objects must be atoms, got {type(q.object).__name__}")
                key = value_key(q.object)
                objs = (
                    self._spo.setdefault(q.graph, {})
                    .setdefault(q.subject, {})
                    .setdefault(q.predicate, {})
                )
                if key in objs:
                    continue
                objs[key] = q.object
                entry = self._pos.setdefault(q.graph, {}).setdefault(q.predicate, {})
                if key not in entry:
                    entry[key] = (q.object, set())
                entry[key][1].add(q.subject)
                added += 1
                self._count += 1
        return added

    def remove(self, quads) -> int:
        gone = 0
        with self._lock:
            for q in quads:
                key = value_key(q.object)
                try:
                    del self._spo[q.graph][q.subject][q.predicate][key]
                except KeyError:
                    continue
                obj, subs = self._pos[q.graph][q.predicate][key]
                subs.discard(q.subject)
                if not subs:
                    del self._pos[q.graph][q.predicate][key]
                gone += 1
                self._count -= 1
        return gone

    def __len__(self) -> int:
        return self._count

    def graphs(self) -> list[str]:
        with self._lock:
            return sorted(g for g, subs in self._spo.items() if any(any(ps.values()) for ps in subs.values()))

    def quads(self, graph: str | None = None) -> list[Quad]:
        with self._lock:
            out = []
            for g, subs in self._spo.items():
                if graph is not None and g != graph:
                    continue
                for s, preds in subs.items():
                    for p, objs in preds.items():
                        for o in objs.values():
                            out.append(Quad(s, p, o, g))
            out.sort(key=lambda q: (q.graph, q.subject, q.predicate, value_key(q.object)))
            return out

    def match(self, graph: str, subject: str | None = None, predicate: str | None = None, obj=None):
        """Concrete-term lookup; None means wildcard. Returns matching quads."""
        with self._lock:
            out = []
            for q in self._iter_matches(graph, subject, predicate, obj):
                out.append(q)
            return out

    def _iter_matches(self, graph, subject, predicate, obj):
        subs = self._spo.get(graph, {})
        if subject is not None:
            preds = subs.get(subject, {})
            pred_items = [(predicate, preds.get(predicate, {}))] if predicate is not None else preds.items()
            for p, objs in pred_items:
                if obj is not None:
                    key = value_key(obj)
                    if key in objs:
                        yield Quad(subject, p, objs[key], graph)
                else:
                    for o in objs.values():
                        yield Quad(subject, p, o, graph)
            return
        pos = self._pos.get(graph, {})
        pred_items = [(predicate, pos.get(predicate, {}))] if predicate is not None else pos.items()
        for p, entry in pred_items:
            if obj is not None:
                key = value_key(obj)
                if key in entry:
                    o, ss = entry[key]
                    for s in ss:
                        yield Quad(s, p, o, graph)
            else:
                for o, ss in entry.values():
                    for s in ss:
                        yield Quad(s, p, o, graph)

    # ------------------------------------------------------------ queries

    def evaluate(self, query: Query, seed: dict | None = None, namespaces: dict | None = None) -> list[dict]:
        """Every frame extending the seed that satisfies the query clauses.

        The seed may bind any subset of the query's variables. The result is
        deduplicated and sorted by bound values, so evaluation order never
        shows through.
        """
        frames = [dict(seed)] if seed else [{}]
        with self._lock:
            for clause in query.clauses:
                frames = self._apply(clause, frames, namespaces or {})
        seen = set()
        out = []
        for f in frames:
            k = frame_key(f)
            if k not in seen:
                seen.add(k)
                out.append(f)
        out.sort(key=frame_key)
        return out

    def _apply(self, clause, frames, namespaces):
        if isinstance(clause, ConceptPattern):
            return self._apply_patterns([clause], frames, namespaces)
        if isinstance(clause, GraphPattern):
            return self._apply_patterns([clause], frames, namespaces)
        if isinstance(clause, OptionalBlock):
            out = []
            for f in frames:
                ext = [f]
                for inner in clause.clauses:
                    ext = self._apply(inner, ext, namespaces)
                out.extend(ext if ext else [f])
            return out
        if isinstance(clause, NotExists):
            out = []
            for f in frames:
                ext = [f]
                for inner in clause.clauses:
                    ext = self._apply(inner, ext, namespaces)
                    if not ext:
                        break
                if not ext:
                    out.append(f)
            return out
        if isinstance(clause, Bind):
            out = []
            for f in frames:
                val = self._eval_expr(clause.expr, f)
                if val is _UNBOUND:
                    out.append(f)
                elif clause.target in f:
                    if values_equal(f[clause.target], val):
                        out.append(f)
                else:
                    g = dict(f)
                    g[clause.target] = val
                    out.append(g)
            return out
        if isinstance(clause, Compare):
            return [f for f in frames if self._test(clause, f)]
        raise QueryError(f"unknown clause type: {type(clause).__name__}")

    def _apply_patterns(self, patterns, frames, namespaces):
        for pat in patterns:
            if isinstance(pat, ConceptPattern):
                ns = namespaces.get(pat.concept)
                if ns is None:
                    raise QueryError(f"unknown concept namespace: {pat.concept}")
                triples = [(s, ns.predicate(p), o) for s, p, o in pat.triples]
                graph = ns.graph
            else:
                triples, graph = list(pat.triples), pat.graph
            for s_term, pred, o_term in triples:
                frames = self._match_triple(graph, s_term, pred, o_term, frames)
                if not frames:
                    return []
        return frames

    def _match_triple(self, graph, s_term, pred, o_term, frames):
        out = []
        for f in frames:
            s_val = f.get(s_term.name, _UNBOUND) if is_var(s_term) else s_term
            o_val = f.get(o_term.name, _UNBOUND) if is_var(o_term) else o_term
            subject = None
            if s_val is not _UNBOUND:
                subject = _as_subject(s_val)
                if subject is None:
                    continue
            obj = None if o_val is _UNBOUND else o_val
            for q in self._iter_matches(graph, subject, pred, obj):
                g = f
                if is_var(s_term) and s_val is _UNBOUND:
                    g = dict(g)
                    g[s_term.name] = Ref(q.subject)
                if is_var(o_term):
                    bound = g.get(o_term.name, _UNBOUND)
                    if bound is _UNBOUND:
                        if g is f:
                            g = dict(g)
                        g[o_term.name] = q.object
                    elif not values_equal(bound, q.object):
                        continue  # same var bound twice in this triple must agree
                out.append(g)
        return out

    def _eval_expr(self, expr, frame):
        if is_var(expr):
            return frame.get(expr.name, _UNBOUND)
        if isinstance(expr, FuncCall):
            if expr.name == "uuid":
                return Ref(new_id())
            if expr.name == "coalesce":
                for arg in expr.args:
                    val = self._eval_expr(arg, frame)
                    if val is not _UNBOUND:
                        return val
                return _UNBOUND
            raise QueryError(f"unknown function: {expr.name}")
        return expr

    def _test(self, clause, frame):
        vals = []
        for term in (clause.left, clause.right):
            if is_var(term):
                if term.name not in frame:
                    raise QueryError(f"unbound variable in filter: {term.name}")
                vals.append(frame[term.name])
            else:
                vals.append(term)
        a, b = vals
        if clause.op == "==":
            return values_equal(a, b)
        if clause.op == "!=":
            return not values_equal(a, b)
        ka, kb = value_key(a), value_key(b)
        if ka[0] != kb[0]:
            return False  # ordered comparison across types never holds
        if clause.op == "<":
            return ka < kb
        if clause.op == "<=":
            return ka <= kb
        if clause.op == ">":
            return ka > kb
        if clause.op == ">=":
            return ka >= kb
        raise QueryError(f"unknown comparison operator: {clause.op}")


_UNBOUND = object()


def _as_subject(value) -> str | None:
    if isinstance(value, Ref):
        return value.iri
    if isinstance(value, str) and "://" in value:
        return value
    return None


def group_by_eachthen(frames: list[dict], var: str = EACHTHEN) -> list[dict]:
    """Collapse frames into one frame per distinct value of the grouping var.

    Within a group, a variable with one distinct value stays scalar; several
    distinct values become a sorted, deduplicated list. Variables bound in no
    frame of the group stay absent.
    """
    if not frames:
        return []
    groups: dict = {}
    order = []
    for f in frames:
        if var not in f:
            raise GroupingError(f"grouping variable {var} unbound in a frame")
        k = value_key(f[var])
        if k not in groups:
            groups[k] = []
            order.append(k)
        groups[k].append(f)
    out = []
    for k in sorted(order):
        members = groups[k]
        names = sorted({n for f in members for n in f})
        merged = {}
        for n in names:
            distinct = {}
            for f in members:
                if n in f:
                    distinct.setdefault(value_key(f[n]), f[n])
            if not distinct:
                continue
            if len(distinct) == 1:
                merged[n] = next(iter(distinct.values()))
            else:
                merged[n] = [distinct[kk] for kk in sorted(distinct)]
        out.append(merged)
    return out


class GraphView:
    """A concept's handle on its own state graph. No way to name other graphs."""

    def __init__(self, store: QuadStore, graph: str) -> None:
        self._store = store
        self._graph = graph

    @property
    def graph(self) -> str:
        return self._graph

    def add(self, subject: str, predicate: str, obj) -> None:
        self._store.insert([Quad(subject, predicate, obj, self._graph)])

    def set(self, subject: str, predicate: str, obj) -> None:
        """Replace whatever values (subject, predicate) had with one value."""
        old = self._store.match(self._graph, subject, predicate)
        self._store.remove(old)
        self.add(subject, predicate, obj)

    def remove(self, subject: str | None = None, predicate: str | None = None, obj=None) -> int:
        return self._store.remove(self._store.match(self._graph, subject, predicate, obj))

    def objects(self, subject: str, predicate: str) -> list:
        vals = [q.object for q in self._store.match(self._graph, subject, predicate)]
        vals.sort(key=value_key)
        return vals

    def value(self, subject: str, predicate: str, default=None):
        vals = self.objects(subject, predicate)
        return vals[0] if vals else default

    def subjects(self, predicate: str, obj=None) -> list[str]:
        return sorted({q.subject for q in self._store.match(self._graph, None, predicate, obj)})

    def has(self, subject: str | None = None, predicate: str | None = None, obj=None) -> bool:
        return bool(self._store.match(self._graph, subject, predicate, obj))


def _dump_term(value) -> str:
    if isinstance(value, Ref):
        return f"<{value.iri}>"
    if value is NIL:
        return "rdf:nil"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value)
    return str(value)


def dump(store: QuadStore, graph: str | None = None) -> str:
    """Snapshot as sorted quad lines: subject predicate object graph."""
    lines = sorted(
        f"<{q.subject}> <{q.predicate}> {_dump_term(q.object)} <{q.graph}> ."
        for q in store.quads(graph)
    )
    return "".join(line + "\n" for line in lines)
