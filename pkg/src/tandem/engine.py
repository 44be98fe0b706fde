"""The synchronization engine.

Completions land on a queue. Each step pops one and matches it against every
rule: the when patterns must all be satisfied by completions of the same flow,
the where clause is evaluated against current concept state, and each
surviving frame instantiates the then templates as fresh invocations, wired
back to their causes by provenance edges labeled with the rule name. Every
record and edge is appended to a JSON-lines log before it takes effect, so a
crashed run can be replayed into the exact same action graph.
"""

from __future__ import annotations

import json
import threading
import uuid
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

from .core import (
    DEFAULT_SCHEMA,
    UUID_RE,
    ActionRecord,
    Quad,
    Ref,
    Schema,
    SyncEdge,
    edge_from_json,
    edge_to_json,
    new_flow,
    new_id,
    qualify,
    record_from_json,
    record_to_json,
    record_to_quads,
    to_jsonable,
    values_equal,
)
from .speclang import ConceptSpec, validate_against
from .store import (
    GraphView,
    Namespace,
    QuadStore,
    frame_key,
    group_by_eachthen,
    has_eachthen,
    is_var,
)
from .synclang import Rec, SyncDef, check_syncs

DEFAULT_PREFIX = "https://concepts.example/v0/"


class EngineError(Exception):
    pass


class RecoveryError(Exception):
    """Log replay failed. `position` is the 1-based offending line number."""

    def __init__(self, message: str, position: int) -> None:
        super().__init__(f"line {position}: {message}")
        self.position = position


@dataclass(frozen=True)
class TraceNode:
    record: ActionRecord
    syncs: tuple  # names of the rules that caused this record; () for roots


@dataclass(frozen=True)
class FlowTrace:
    """Everything one flow did: its records and the edges among them."""

    flow: str
    root: ActionRecord | None
    nodes: tuple
    edges: tuple

    def sync_labels(self) -> set:
        return {e.sync for e in self.edges}


_MISSING = object()


def _match_fields(fields, data, frame):
    # subset semantics: every pattern field must be present and agree,
    # fields absent from the pattern are unconstrained
    for fname, term in fields:
        if fname not in data:
            return None
        frame = _match_term(term, data[fname], frame)
        if frame is None:
            return None
    return frame


def _match_term(term, value, frame):
    if is_var(term):
        bound = frame.get(term.name, _MISSING)
        if bound is _MISSING:
            frame = dict(frame)
            frame[term.name] = value
            return frame
        return frame if values_equal(bound, value) else None
    if isinstance(term, Rec):
        if not isinstance(value, dict):
            return None
        return _match_fields(term.fields, value, frame)
    return frame if values_equal(term, value) else None


def _fill_fields(fields, frame) -> dict:
    out = {}
    for fname, term in fields:
        if is_var(term):
            # a variable with no value in this frame drops the whole field;
            # rules that want a default say so with COALESCE in where
            if term.name in frame:
                out[fname] = frame[term.name]
        elif isinstance(term, Rec):
            out[fname] = _fill_fields(term.fields, frame)
        else:
            out[fname] = term
    return out


def normalize_actions(records) -> list[str]:
    """Canonical text of each record with uuids renamed by first appearance.

    Two runs of the same external inputs differ only in minted identifiers;
    after renaming, equal executions produce equal lists.
    """
    mapping: dict[str, str] = {}

    def rename(match):
        return mapping.setdefault(match.group(0), f"u{len(mapping)}")

    out = []
    for rec in records:
        doc = {
            "concept": rec.concept,
            "name": rec.name,
            "flow": rec.flow,
            "input": to_jsonable(rec.input),
        }
        if rec.output is not None:
            doc["output"] = to_jsonable(rec.output)
        out.append(UUID_RE.sub(rename, json.dumps(doc, sort_keys=True)))
    return out


def normalize_flows(records) -> list[tuple]:
    """Per-flow normal forms, insensitive to how whole flows interleaved.

    Records are grouped by flow token in encounter order and each group is
    renamed on its own, so two runs compare equal exactly when they did the
    same thing flow by flow.
    """
    groups: dict[str, list] = {}
    for rec in records:
        groups.setdefault(rec.flow, []).append(rec)
    return sorted(tuple(normalize_actions(group)) for group in groups.values())


class Engine:
    """Owns the store, the ruleset, the work queue, and the append-only log."""

    def __init__(
        self,
        prefix: str = DEFAULT_PREFIX,
        version: str = "dev",
        schema: Schema = DEFAULT_SCHEMA,
        step_limit: int = 10_000,
    ) -> None:
        self.prefix = prefix
        self.version = version
        self.schema = schema
        self.step_limit = step_limit
        self.store = QuadStore()
        self.actions_graph = f"app://graphs/{version}/actions"
        self.concepts: dict[str, tuple[ConceptSpec, object]] = {}
        self.namespaces: dict[str, Namespace] = {}
        self.bootstrap: str | None = None
        self.syncs: list[SyncDef] = []
        self.records: dict[str, ActionRecord] = {}  # insertion order = log order
        self.edges: list[SyncEdge] = []
        self.fired: set = set()
        self.queue: deque = deque()
        self._by_iri: dict[str, str] = {}
        self._edge_groups: dict[tuple, set] = {}
        self._log = None
        self._log_path: Path | None = None
        self._lock = threading.RLock()

    # ------------------------------------------------------------- assembly

    def register_concept(self, spec: ConceptSpec, handle, bootstrap: bool = False) -> None:
        with self._lock:
            if spec.name in self.concepts:
                raise EngineError(f"concept already registered: {spec.name}")
            validate_against(spec, self.prefix)
            iri = qualify(self.prefix, spec.name)
            graph = f"app://graphs/{self.version}/{spec.name}"
            ns = Namespace(graph, iri)
            handle.attach(GraphView(self.store, graph), ns)
            self.concepts[spec.name] = (spec, handle)
            self.namespaces[spec.name] = ns
            self._by_iri[iri] = spec.name
            if bootstrap:
                if self.bootstrap is not None:
                    raise EngineError(f"bootstrap concept already chosen: {self.bootstrap}")
                self.bootstrap = spec.name

    def register_sync(self, sync: SyncDef) -> None:
        with self._lock:
            if any(s.name == sync.name for s in self.syncs):
                raise EngineError(f"sync already registered: {sync.name}")
            self.syncs.append(sync)

    def register_syncs(self, syncs) -> None:
        for sync in syncs:
            self.register_sync(sync)

    def lint(self) -> list[str]:
        """Static diagnostics for the registered ruleset. Empty means clean."""
        with self._lock:
            specs = [spec for spec, _ in self.concepts.values()]
            return check_syncs(self.syncs, specs)

    # ------------------------------------------------------------ durability

    def attach_log(self, path) -> None:
        with self._lock:
            self._log_path = Path(path)
            self._log = open(self._log_path, "a", encoding="utf-8")
            if self._log.tell() == 0:
                self._log.write(json.dumps({"version": self.version}) + "\n")
                self._log.flush()

    def close(self) -> None:
        with self._lock:
            if self._log is not None:
                self._log.close()
                self._log = None

    def _append_batch(self, lines: list[str]) -> None:
        # one write + flush per batch: the batch is the recovery unit
        if self._log is None or not lines:
            return
        self._log.write("".join(line + "\n" for line in lines))
        self._log.flush()

    # -------------------------------------------------------------- plumbing

    def _insert_record(self, rec: ActionRecord) -> None:
        old = self.records.get(rec.id)
        if old is not None:
            self.store.remove(record_to_quads(old, self.actions_graph, self.schema))
        self.records[rec.id] = rec
        self.store.insert(record_to_quads(rec, self.actions_graph, self.schema))

    def _insert_edge(self, edge: SyncEdge) -> None:
        self.edges.append(edge)
        self.store.insert(
            [Quad(edge.from_id, self.schema.sync(edge.sync), Ref(edge.to_id), self.actions_graph)]
        )
        self._edge_groups.setdefault((edge.sync, edge.to_id), set()).add(edge.from_id)

    def _accepts(self, spec: ConceptSpec, action: str, given: dict) -> bool:
        keys = set(given)
        for sig in spec.overloads(action):
            declared = {f for f, _ in sig.inputs}
            if declared <= keys and (sig.open_input or keys <= declared):
                return True
        return False

    def _run_handle(self, rec: ActionRecord) -> dict:
        name = self._by_iri.get(rec.concept)
        if name is None:
            return {"error": f"unknown concept: {rec.concept}"}
        spec, handle = self.concepts[name]
        if not self._accepts(spec, rec.name, rec.input):
            return {"error": f"no matching overload: {name}/{rec.name}"}
        try:
            out = handle.invoke(rec.name, rec.input, rec.id)
        except Exception as exc:  # a broken handle must not take the engine down
            return {"error": f"{name}/{rec.name} raised: {exc}"}
        if not isinstance(out, dict):
            return {"error": f"{name}/{rec.name} returned a non-record"}
        return out

    # ------------------------------------------------------------- execution

    def submit_external(self, concept: str, action: str, inputs: dict) -> str:
        """Record one externally caused completion and return its fresh flow.

        Only the bootstrap concept takes external submissions; everything
        else is reachable solely through rule firings.
        """
        with self._lock:
            if self.bootstrap is None or concept != self.bootstrap:
                raise EngineError(
                    f"external submissions enter through the bootstrap concept, not {concept}"
                )
            flow = new_flow()
            rec = ActionRecord(new_id(), qualify(self.prefix, concept), action, flow, dict(inputs))
            done = replace(rec, output=self._run_handle(rec))
            self._append_batch([record_to_json(done)])
            self._insert_record(done)
            self.queue.append(done.id)
            return flow

    def _match_when(self, sync: SyncDef, trigger: ActionRecord) -> list:
        """Frames where the trigger fills one when pattern and same-flow
        completions fill the rest; already-fired keys are excluded."""
        flow_recs = [
            r for r in self.records.values() if r.flow == trigger.flow and r.is_completion
        ]
        pats = sync.when
        results = []
        seen = set()

        def extend(i, frame, used, hit):
            if i == len(pats):
                if not hit:
                    return
                key = (sync.name, tuple(sorted(used)))
                if key in self.fired:
                    return
                mark = (key, frame_key(frame))
                if mark in seen:
                    return
                seen.add(mark)
                results.append((frame, key))
                return
            pat = pats[i]
            iri = qualify(self.prefix, pat.concept)
            for rec in flow_recs:
                if rec.id in used:
                    continue
                if rec.concept != iri or rec.name != pat.action:
                    continue
                nxt = _match_fields(pat.inputs, rec.input, frame)
                if nxt is None:
                    continue
                nxt = _match_fields(pat.outputs, rec.output, nxt)
                if nxt is None:
                    continue
                extend(i + 1, nxt, used + (rec.id,), hit or rec.id == trigger.id)

        extend(0, {}, (), False)
        return results

    def _fire(self, sync: SyncDef, frame: dict, key: tuple, flow: str) -> list:
        if key in self.fired:
            return []
        frames = [frame]
        if sync.where is not None:
            frames = self.store.evaluate(sync.where, seed=frame, namespaces=self.namespaces)
            if has_eachthen(sync.where):
                frames = group_by_eachthen(frames)
        self.fired.add(key)
        invocations = []
        edges = []
        if frames:
            for fr in frames:
                for tmpl in sync.then:
                    inv = ActionRecord(
                        new_id(),
                        qualify(self.prefix, tmpl.concept),
                        tmpl.action,
                        flow,
                        _fill_fields(tmpl.fields, fr),
                    )
                    invocations.append(inv)
                    edges.extend(SyncEdge(cid, sync.name, inv.id) for cid in key[1])
        else:
            # nothing to do, but the firing must still leave its mark or the
            # same match would be retried forever
            marker = self.schema.noop(uuid.uuid4().hex)
            edges.extend(SyncEdge(cid, sync.name, marker) for cid in key[1])
        lines = [record_to_json(r) for r in invocations] + [edge_to_json(e) for e in edges]
        self._append_batch(lines)
        for r in invocations:
            self._insert_record(r)
        for e in edges:
            self._insert_edge(e)
        return invocations

    def _dispatch(self, inv: ActionRecord) -> None:
        done = replace(inv, output=self._run_handle(inv))
        self._append_batch([record_to_json(done)])
        self._insert_record(done)
        self.queue.append(done.id)

    def step(self) -> bool:
        """Process one queued completion. False when the queue is empty."""
        with self._lock:
            if not self.queue:
                return False
            trigger = self.records[self.queue.popleft()]
            for sync in self.syncs:
                for frame, key in self._match_when(sync, trigger):
                    for inv in self._fire(sync, frame, key, trigger.flow):
                        self._dispatch(inv)
            return True

    def run_to_quiescence(self) -> int:
        steps = 0
        while self.step():
            steps += 1
            if steps > self.step_limit:
                raise EngineError(
                    f"no quiescence after {self.step_limit} steps, a rule loop is likely"
                )
        return steps

    def pending_matches(self) -> list:
        """Every (sync name, FiringKey) a fresh matching pass would fire now.

        A quiescent engine must return []: all satisfiable matches are
        already evidenced by edges.
        """
        with self._lock:
            out = []
            for rec in self.records.values():
                if not rec.is_completion:
                    continue
                for sync in self.syncs:
                    for _frame, key in self._match_when(sync, rec):
                        out.append((sync.name, key))
            return out

    # -------------------------------------------------------------- recovery

    def recover_from(self, path, resume: bool = True) -> str | None:
        """Replay a log into this engine, then reopen it for appending.

        Concept state is rebuilt by re-running each completed action's
        handle; the logged output stays authoritative. Firing guards come
        back from the edge lines, so nothing already evidenced fires twice.
        Returns the version tag the log was written under (None when empty).

        resume=False loads the log read-only for inspection: no reopening,
        no pending dispatch, nothing queued.
        """
        log_path = Path(path)
        text = log_path.read_text(encoding="utf-8") if log_path.exists() else ""
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        version = None
        completions: list[str] = []
        maybe_pending: list[str] = []
        with self._lock:
            for pos, line in enumerate(lines, start=1):
                try:
                    doc = json.loads(line)
                except ValueError as exc:
                    raise RecoveryError(f"unreadable log line: {exc}", pos)
                if not isinstance(doc, dict):
                    raise RecoveryError("log line is not an object", pos)
                if pos == 1:
                    if set(doc) != {"version"}:
                        raise RecoveryError("missing version header", 1)
                    version = doc["version"]
                    continue
                if set(doc) == {"from", "sync", "to"}:
                    self._insert_edge(edge_from_json(line))
                    continue
                try:
                    rec = record_from_json(line)
                except Exception as exc:
                    raise RecoveryError(f"bad action record: {exc}", pos)
                self._insert_record(rec)
                if rec.is_completion:
                    self._replay_state(rec)
                    completions.append(rec.id)
                else:
                    maybe_pending.append(rec.id)
            pending = [rid for rid in maybe_pending if not self.records[rid].is_completion]
            self.fired = {
                (sync, tuple(sorted(froms)))
                for (sync, _to), froms in self._edge_groups.items()
            }
            if resume:
                # every completion gets another matching pass; the guards
                # make the ones that already fired inert
                self.queue.extend(completions)
        if not resume:
            return version
        self.attach_log(log_path)
        with self._lock:
            for rid in pending:
                self._dispatch(self.records[rid])
        return version

    def _replay_state(self, rec: ActionRecord) -> None:
        name = self._by_iri.get(rec.concept)
        if name is None:
            return  # record kept, state graph unknown to this configuration
        spec, handle = self.concepts[name]
        if not self._accepts(spec, rec.name, rec.input):
            return
        try:
            handle.invoke(rec.name, rec.input, rec.id)
        except Exception:
            pass  # the original run answered this with an error completion

    # ------------------------------------------------------------ inspection

    def actions(self) -> list[ActionRecord]:
        with self._lock:
            return list(self.records.values())

    def flow_records(self, flow: str) -> list[ActionRecord]:
        with self._lock:
            return [r for r in self.records.values() if r.flow == flow]

    def root_records(self) -> list[ActionRecord]:
        """Completions nothing caused: the external submissions, in log order."""
        with self._lock:
            targets = {e.to_id for e in self.edges}
            return [r for r in self.records.values() if r.id not in targets]

    def trace_flow(self, flow: str) -> FlowTrace:
        """The provenance DAG of one flow: records, edges, and rule labels."""
        with self._lock:
            recs = [r for r in self.records.values() if r.flow == flow]
            ids = {r.id for r in recs}
            edges = tuple(e for e in self.edges if e.from_id in ids)
            incoming: dict[str, list] = {}
            for e in edges:
                if e.to_id in ids:
                    labels = incoming.setdefault(e.to_id, [])
                    if e.sync not in labels:
                        labels.append(e.sync)
            nodes = tuple(TraceNode(r, tuple(incoming.get(r.id, ()))) for r in recs)
            roots = [r for r in recs if not incoming.get(r.id)]
            return FlowTrace(flow, roots[0] if roots else None, nodes, edges)
