"""Coordinator/worker stepping of several characters on one shared terrain.

The coordinator owns the authoritative grid.  Each character is assigned to
a worker; a worker asks for the cells of its next active rectangle, steps its
characters there and commits the changed cells.  A grant is held back until
every earlier step of any other character whose rectangle overlaps has been
committed, so the final terrain equals the serial run whatever the timing.
Characters whose rectangles overlap at a step are stepped together by one
worker.

Transports: ``inproc`` runs workers as threads talking over queues,
``stream`` runs them as child processes connected through localhost TCP
with length-prefixed frames (see :func:`encode_frame`).
"""

from __future__ import annotations

import hashlib
import logging
import multiprocessing as mp
import pickle
import queue
import random
import socket
import struct
import threading
import time
import traceback
from dataclasses import dataclass, field

import numpy as np

from . import particles as P
from .deformation import (
    RECORD_DTYPE, Character, MaterialParams, Patch, StepReport, character_rect, plan_groups, step_patch,
)
from .geometry import Body
from .terrain import CellRect, GridConfig, SparseColumnGrid, Window

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
HELLO, INIT, GRANT_REQ, GRANT, COMMIT, DONE, ERROR = range(1, 8)
TAG_NAMES = {HELLO: "HELLO", INIT: "INIT", GRANT_REQ: "GRANT_REQ", GRANT: "GRANT",
             COMMIT: "COMMIT", DONE: "DONE", ERROR: "ERROR"}


class SchedulerError(RuntimeError):
    pass


class ProtocolError(SchedulerError):
    pass


# -- plan ------------------------------------------------------------------------

@dataclass(frozen=True)
class CharacterTask:
    id: str
    bodies: tuple[Body, ...]
    worker: int = -1
    step: int = 0


@dataclass(frozen=True)
class Item:
    """One group of characters stepped together at one step."""

    index: int
    step: int
    members: tuple[str, ...]
    rect: CellRect
    worker: int


class Plan:
    """Active rectangles, merged groups and worker assignment for every step.

    Rectangles depend on trajectories only, so the whole schedule is known
    before stepping starts.
    """

    def __init__(self, characters: list[Character], times, config: GridConfig, margin: float,
                 n_workers: int = 1):
        self.times = np.asarray(times, dtype=np.float64)
        self.character_ids = sorted(c.id for c in characters)
        if len(set(self.character_ids)) != len(self.character_ids):
            raise SchedulerError("duplicate character id")
        self.n_workers = max(1, n_workers)
        self.assignment = {cid: k % self.n_workers for k, cid in enumerate(self.character_ids)}
        by_id = {c.id: c for c in characters}
        self.rects = {cid: [character_rect(by_id[cid], float(t), config, margin) for t in self.times]
                      for cid in self.character_ids}
        self.items: list[Item] = []
        self.item_of = {cid: [-1] * len(self.times) for cid in self.character_ids}
        self.items_by_step: list[list[int]] = []
        for k in range(len(self.times)):
            here = []
            for ids, rect in plan_groups({cid: self.rects[cid][k] for cid in self.character_ids}):
                item = Item(len(self.items), k, ids, rect, self.assignment[ids[0]])
                self.items.append(item)
                here.append(item.index)
                for cid in ids:
                    self.item_of[cid][k] = item.index
            self.items_by_step.append(here)

    @property
    def n_steps(self) -> int:
        return len(self.times)

    def worker_items(self, worker: int) -> list[int]:
        return [it.index for it in self.items if it.worker == worker]

    def groups(self, step: int) -> list[Item]:
        return [self.items[k] for k in self.items_by_step[step]]

    def next_item(self, cid: str, step: int) -> int:
        row = self.item_of[cid]
        for k in range(step + 1, len(row)):
            if row[k] >= 0:
                return row[k]
        return -1

    def first_worker(self, cid: str) -> int:
        """Worker holding the character's state before its first step."""
        k = self.next_item(cid, -1)
        return self.items[k].worker if k >= 0 else self.assignment[cid]

    def prev_item(self, cid: str, step: int) -> int:
        row = self.item_of[cid]
        for k in range(step - 1, -1, -1):
            if row[k] >= 0:
                return row[k]
        return -1


def register(tasks: list[CharacterTask], n_workers: int | None = None) -> dict[str, int]:
    """One worker per character (round-robin when fewer workers are given)."""
    if not tasks:
        raise SchedulerError("no characters to register")
    ids = [t.id for t in tasks]
    if len(set(ids)) != len(ids):
        raise SchedulerError("duplicate character id")
    n = len(tasks) if n_workers is None else max(1, n_workers)
    return {cid: k % n for k, cid in enumerate(sorted(ids))}


# -- messages ----------------------------------------------------------------------

@dataclass
class Grant:
    item: int
    step: int
    window: Window
    states: dict = field(default_factory=dict)  # migrated emitter lists


@dataclass
class ChangeSet:
    worker: int
    item: int
    step: int
    records: np.ndarray
    rect: CellRect
    contact: np.ndarray
    contour: np.ndarray
    next_rect: dict = field(default_factory=dict)
    states: dict = field(default_factory=dict)
    particles: dict = field(default_factory=dict)
    displaced_volume: dict = field(default_factory=dict)
    erosion_passes: int = 0

    @classmethod
    def empty(cls, worker: int, item: int, step: int, rect: CellRect) -> "ChangeSet":
        return cls(worker, item, step, np.empty(0, dtype=RECORD_DTYPE), rect,
                   np.zeros(rect.shape, bool), np.zeros(rect.shape, np.int32))


def digest(tag: int, payload) -> str:
    """Content hash of a message, independent of transport and encoding."""
    h = hashlib.sha256(bytes([tag]))
    if tag == GRANT_REQ:
        h.update(struct.pack("<q", payload["item"]))
    elif tag == GRANT:
        g = payload["grant"]
        h.update(struct.pack("<q4q", g.item, *g.window.rect))
        for a in (g.window.height, g.window.contact, g.window.contour):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(",".join(sorted(g.states)).encode())
    elif tag == COMMIT:
        cs = payload["change_set"]
        h.update(struct.pack("<qq", cs.item, cs.step))
        for a in (cs.records, cs.contact, cs.contour):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(",".join(sorted(cs.states)).encode())
    return h.hexdigest()[:16]


def encode_frame(tag: int, payload) -> bytes:
    """``<u32 length><u8 version><u8 tag><pickle body>``; length counts the rest."""
    body = pickle.dumps(payload, protocol=pickle.HIGHEST_PROTOCOL)
    return struct.pack("<IBB", len(body) + 2, PROTOCOL_VERSION, tag) + body


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("stream closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket):
    (length,) = struct.unpack("<I", _recv_exact(sock, 4))
    data = _recv_exact(sock, length)
    version, tag = data[0], data[1]
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    return tag, pickle.loads(data[2:])


# -- coordinator -----------------------------------------------------------------------

class Coordinator:
    """Authoritative grid plus the grant/commit bookkeeping."""

    def __init__(self, grid: SparseColumnGrid, plan: Plan, frame_steps=(), on_frame=None):
        self.grid = grid
        self.plan = plan
        self.progress = {cid: -1 for cid in plan.character_ids}
        self.granted: set[int] = set()
        self.committed: set[int] = set()
        self.states: dict[str, list] = {}
        self.last_writer: dict[tuple[int, int], tuple[int, int]] = {}
        self.reports: list[ChangeSet] = []
        self.frame_steps = sorted(set(int(f) for f in frame_steps)) if on_frame else []
        self.on_frame = on_frame
        self._frames_done = 0
        self._left_per_step = [len(x) for x in plan.items_by_step]
        self._frame_particles: dict[int, dict] = {}
        self._item_at = {(it.step, tuple(it.rect)): it.index for it in plan.items}

    # dependency rule -------------------------------------------------------

    def blockers(self, item_index: int) -> list[int]:
        """Uncommitted items that must land before ``item_index`` may read its cells."""
        item = self.plan.items[item_index]
        out = []
        for cid in self.plan.character_ids:
            row = self.plan.item_of[cid]
            if cid in item.members:
                prev = self.plan.prev_item(cid, item.step)
                if prev >= 0 and prev not in self.committed:
                    out.append(prev)
                continue
            for s in range(self.progress[cid] + 1, item.step):
                k = row[s]
                if k >= 0 and k not in self.committed and self.plan.items[k].rect.intersects(item.rect):
                    out.append(k)
                    break
        return out

    def _frame_ready(self, step: int) -> bool:
        # frames are snapshots after a step; later steps wait until it is taken
        return all(f >= step for f in self.frame_steps[self._frames_done:])

    def can_grant(self, item_index: int) -> bool:
        item = self.plan.items[item_index]
        return self._frame_ready(item.step) and not self.blockers(item_index)

    def grant_region(self, worker: int, step: int, rect: CellRect):
        """Cell data for ``rect`` at ``step``, or None while the request must wait."""
        k = self._item_at.get((step, tuple(rect)))
        if k is None:
            raise ProtocolError(f"no planned region {tuple(rect)} at step {step}")
        return self.grant_item(worker, k)

    def grant_item(self, worker: int, item_index: int):
        """Cell data for a planned item's rectangle, or None to block."""
        item = self.plan.items[item_index]
        if item.worker != worker:
            raise ProtocolError(f"worker {worker} asked for item {item_index} owned by {item.worker}")
        if item_index in self.granted:
            raise ProtocolError(f"item {item_index} granted twice")
        if not self.can_grant(item_index):
            return None
        self.granted.add(item_index)
        self.grid.mark_active(item.rect, key=item_index)
        window = self.grid.read_window(item.rect)
        states = {cid: self.states.pop(cid) for cid in item.members if cid in self.states}
        return Grant(item_index, item.step, window, states)

    def commit(self, cs: ChangeSet):
        item = self.plan.items[cs.item] if 0 <= cs.item < len(self.plan.items) else None
        if item is None or cs.item not in self.granted or cs.item in self.committed:
            raise ProtocolError(f"commit for item {cs.item} that is not outstanding")
        if cs.step != item.step or cs.worker != item.worker:
            raise ProtocolError(f"commit for item {cs.item} has step {cs.step}/worker {cs.worker}, "
                                f"expected {item.step}/{item.worker}")
        for cid in item.members:
            if self.progress[cid] >= cs.step:
                raise ProtocolError(f"character {cid} already committed step {self.progress[cid]}")
        rec = cs.records
        if len(rec):
            r = item.rect
            bad = (rec["i"] < r.i0) | (rec["i"] >= r.i1) | (rec["j"] < r.j0) | (rec["j"] >= r.j1)
            if bad.any():
                raise ProtocolError(f"worker {cs.worker} changed cells outside its rectangle")
        if cs.contact.shape != item.rect.shape:
            raise ProtocolError("flag arrays do not match the granted rectangle")

        for cause in np.unique(rec["cause"]) if len(rec) else ():
            sel = rec[rec["cause"] == cause]
            self.grid.set_heights(sel["i"], sel["j"], sel["new"])
        self.grid.write_flags(item.rect, cs.contact, cs.contour)
        for i, j in zip(rec["i"].tolist(), rec["j"].tolist()):
            self.last_writer[(i, j)] = (cs.step, cs.worker)
        self.grid.deactivate(cs.item)

        self.committed.add(cs.item)
        for cid in item.members:
            self.progress[cid] = cs.step
        self.states.update(cs.states)
        self.reports.append(ChangeSet(cs.worker, cs.item, cs.step, np.empty(0, RECORD_DTYPE), cs.rect,
                                      np.zeros(0, bool), np.zeros(0, np.int32),
                                      displaced_volume=cs.displaced_volume,
                                      erosion_passes=cs.erosion_passes))
        if cs.particles:
            self._frame_particles.setdefault(cs.step, {}).update(cs.particles)
        self._left_per_step[cs.step] -= 1
        self._emit_frames()

    def _emit_frames(self):
        while self._frames_done < len(self.frame_steps):
            f = self.frame_steps[self._frames_done]
            if any(self._left_per_step[s] for s in range(0, min(f + 1, len(self._left_per_step)))):
                return
            self.on_frame(f, self.grid, self._frame_particles.pop(f, {}))
            self._frames_done += 1

    def merge_overlapping(self, step: int) -> dict[tuple[str, ...], int]:
        """Groups stepped jointly at ``step`` and the worker running each."""
        return {it.members: it.worker for it in self.plan.groups(step)}

    @property
    def finished(self) -> bool:
        return len(self.committed) == len(self.plan.items)


# -- worker ----------------------------------------------------------------------------

@dataclass
class SimSetup:
    """Everything a worker needs besides the cells it is granted."""

    config: GridConfig
    floor: float
    material: MaterialParams
    particle_params: P.ParticleParams
    bodies: dict  # character id -> list[Body]
    times: np.ndarray
    dt: float
    frame_steps: frozenset = frozenset()


class WorkerRuntime:
    def __init__(self, worker: int, setup: SimSetup, plan: Plan, states: dict):
        self.worker = worker
        self.setup = setup
        self.plan = plan
        self.states = dict(states)  # character id -> list[Emitter]
        self.timings: dict[str, float] = {}
        self.busy = 0.0

    def execute(self, grant: Grant) -> ChangeSet:
        t0 = time.perf_counter()
        s = self.setup
        item = self.plan.items[grant.item]
        self.states.update(grant.states)
        chars = [Character(cid, s.bodies[cid], self.states[cid]) for cid in item.members]
        patch = Patch.from_window(grant.window, s.config, s.floor)
        t = float(s.times[item.step])
        rep: StepReport = step_patch(patch, chars, t, s.dt, s.material, s.particle_params,
                                     self.timings, s.config.virtual_extent)
        cs = ChangeSet(self.worker, item.index, item.step, rep.records, item.rect,
                       patch.contact.copy(), patch.contour.copy(),
                       displaced_volume=rep.displaced_volume, erosion_passes=rep.erosion_passes)
        for cid in item.members:
            nxt = self.plan.next_item(cid, item.step)
            if nxt >= 0:
                cs.next_rect[cid] = self.plan.items[nxt].rect
                if self.plan.items[nxt].worker != self.worker:
                    cs.states[cid] = self.states.pop(cid)
            if item.step in s.frame_steps:
                ems = cs.states.get(cid) or self.states.get(cid, [])
                cs.particles[cid] = (np.concatenate([e.pos for e in ems]) if ems else np.zeros((0, 3)),
                                     np.concatenate([e.vel for e in ems]) if ems else np.zeros((0, 3)))
        self.busy += time.perf_counter() - t0
        return cs


def _initial_states(characters: list[Character]) -> dict:
    return {c.id: c.emitters for c in characters}


def _worker_loop(runtime: WorkerRuntime, send, recv, delay=None):
    """Request, step and commit every item owned by this worker, in order."""
    rng = random.Random(delay[0] + runtime.worker) if delay else None
    for k in runtime.plan.worker_items(runtime.worker):
        if rng:
            time.sleep(rng.random() * delay[1])
        send(GRANT_REQ, {"worker": runtime.worker, "item": k})
        tag, payload = recv()
        if tag != GRANT:
            raise ProtocolError(f"expected GRANT, got {TAG_NAMES.get(tag, tag)}")
        cs = runtime.execute(payload["grant"])
        if rng:
            time.sleep(rng.random() * delay[1])
        send(COMMIT, {"worker": runtime.worker, "change_set": cs})
    send(DONE, {"worker": runtime.worker, "states": runtime.states,
                "timings": runtime.timings, "busy": runtime.busy})


# -- runs ----------------------------------------------------------------------------------

@dataclass
class RunResult:
    grid: SparseColumnGrid
    states: dict
    timings: dict
    busy: dict
    wall_clock: float
    trace: list
    reports: list


class _Trace:
    def __init__(self):
        self.lines: dict[int, list] = {}
        self.lock = threading.Lock()

    def log(self, worker: int, direction: str, tag: int, payload):
        item = payload.get("item", payload.get("grant").item if "grant" in payload else
                           payload["change_set"].item if "change_set" in payload else -1)
        with self.lock:
            seq = self.lines.setdefault(worker, [])
            seq.append((worker, len(seq), direction, TAG_NAMES[tag], item, digest(tag, payload)))

    def ordered(self) -> list:
        return [ln for w in sorted(self.lines) for ln in self.lines[w]]


def _serve(coord: Coordinator, inbox: "queue.Queue", reply, n_workers: int, trace: _Trace):
    """Coordinator event loop shared by both transports."""
    pending: list[tuple[int, int]] = []
    done: dict[int, dict] = {}
    waiting: set[int] = set()
    while len(done) < n_workers:
        try:
            tag, payload = inbox.get(timeout=600)
        except queue.Empty:
            raise SchedulerError("no message from any worker for 600 s") from None
        w = payload.get("worker", -1)
        if tag == ERROR:
            raise SchedulerError(f"worker {w} failed:\n{payload['error']}")
        trace.log(w, "in", tag, payload)
        if tag == GRANT_REQ:
            pending.append((payload["item"], w))
            waiting.add(w)
        elif tag == COMMIT:
            coord.commit(payload["change_set"])
        elif tag == DONE:
            done[w] = payload
        progressed = True
        while progressed:
            progressed = False
            for entry in sorted(pending):
                k, wk = entry
                grant = coord.grant_item(wk, k)
                if grant is not None:
                    pending.remove(entry)
                    waiting.discard(wk)
                    out = {"worker": wk, "grant": grant}
                    trace.log(wk, "out", GRANT, out)
                    reply(wk, GRANT, out)
                    progressed = True
        live = n_workers - len(done)
        if live and len(waiting) == live and inbox.empty() and pending:
            raise SchedulerError(f"deadlock: workers {sorted(waiting)} all blocked")
    return done


def run_serial(grid: SparseColumnGrid, characters: list[Character], setup: SimSetup, plan: Plan,
               on_frame=None) -> RunResult:
    """Single in-process worker executing items in plan order."""
    t0 = time.perf_counter()
    coord = Coordinator(grid, plan, setup.frame_steps, on_frame)
    runtime = WorkerRuntime(0, setup, plan, _initial_states(characters))
    trace = _Trace()
    for item in plan.items:
        req = {"worker": 0, "item": item.index}
        trace.log(0, "in", GRANT_REQ, req)
        grant = coord.grant_item(item.worker, item.index)
        if grant is None:
            raise SchedulerError(f"serial run blocked on item {item.index}")
        trace.log(0, "out", GRANT, {"worker": 0, "grant": grant})
        cs = runtime.execute(grant)
        trace.log(0, "in", COMMIT, {"worker": 0, "change_set": cs})
        coord.commit(cs)
    trace.log(0, "in", DONE, {"worker": 0})
    states = dict(runtime.states)
    states.update(coord.states)
    return RunResult(grid, states, dict(runtime.timings), {0: runtime.busy},
                     time.perf_counter() - t0, trace.ordered(), coord.reports)


def _merge_done(done: dict, coord: Coordinator):
    states, timings, busy = {}, {}, {}
    for w in sorted(done):
        states.update(done[w]["states"])
        busy[w] = done[w]["busy"]
        for k, v in done[w]["timings"].items():
            timings[k] = timings.get(k, 0.0) + v
    states.update(coord.states)
    return states, timings, busy


def run_inproc(grid, characters, setup: SimSetup, plan: Plan, on_frame=None, delay=None) -> RunResult:
    """Workers as threads exchanging messages over queues."""
    t0 = time.perf_counter()
    coord = Coordinator(grid, plan, setup.frame_steps, on_frame)
    inbox: queue.Queue = queue.Queue()
    outboxes = {w: queue.Queue() for w in range(plan.n_workers)}
    states = _initial_states(characters)
    trace = _Trace()

    def worker_main(w):
        mine = {cid: st for cid, st in states.items() if plan.first_worker(cid) == w}
        runtime = WorkerRuntime(w, setup, plan, mine)
        try:
            _worker_loop(runtime, lambda tag, p: inbox.put((tag, p)), outboxes[w].get, delay)
        except Exception:
            inbox.put((ERROR, {"worker": w, "error": traceback.format_exc()}))

    threads = [threading.Thread(target=worker_main, args=(w,), daemon=True) for w in range(plan.n_workers)]
    for th in threads:
        th.start()
    done = _serve(coord, inbox, lambda w, tag, p: outboxes[w].put((tag, p)), plan.n_workers, trace)
    for th in threads:
        th.join()
    st, timings, busy = _merge_done(done, coord)
    return RunResult(grid, st, timings, busy, time.perf_counter() - t0, trace.ordered(), coord.reports)


def _stream_worker_main(port: int, worker: int, delay):
    sock = socket.create_connection(("127.0.0.1", port))
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    try:
        sock.sendall(encode_frame(HELLO, {"worker": worker}))
        tag, init = read_frame(sock)
        if tag != INIT:
            raise ProtocolError("expected INIT")
        runtime = WorkerRuntime(worker, init["setup"], init["plan"], init["states"])
        try:
            _worker_loop(runtime, lambda tg, p: sock.sendall(encode_frame(tg, p)),
                         lambda: read_frame(sock), delay)
        except Exception:
            sock.sendall(encode_frame(ERROR, {"worker": worker, "error": traceback.format_exc()}))
    finally:
        sock.close()


def run_stream(grid, characters, setup: SimSetup, plan: Plan, on_frame=None, delay=None) -> RunResult:
    """Workers as child processes connected over localhost stream sockets."""
    t0 = time.perf_counter()
    coord = Coordinator(grid, plan, setup.frame_steps, on_frame)
    states = _initial_states(characters)
    trace = _Trace()
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.bind(("127.0.0.1", 0))
    server.listen(plan.n_workers)
    port = server.getsockname()[1]
    ctx = mp.get_context("fork" if "fork" in mp.get_all_start_methods() else "spawn")
    procs = [ctx.Process(target=_stream_worker_main, args=(port, w, delay), daemon=True)
             for w in range(plan.n_workers)]
    for p in procs:
        p.start()
    inbox: queue.Queue = queue.Queue()
    conns: dict[int, socket.socket] = {}
    try:
        server.settimeout(60)
        for _ in procs:
            conn, _addr = server.accept()
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            tag, hello = read_frame(conn)
            if tag != HELLO:
                raise ProtocolError("expected HELLO")
            w = hello["worker"]
            conns[w] = conn
            mine = {cid: st for cid, st in states.items() if plan.first_worker(cid) == w}
            conn.sendall(encode_frame(INIT, {"setup": setup, "plan": plan, "states": mine}))

        def reader(w, conn):
            try:
                while True:
                    tag, payload = read_frame(conn)
                    inbox.put((tag, payload))
                    if tag in (DONE, ERROR):
                        return
            except Exception:
                inbox.put((ERROR, {"worker": w, "error": traceback.format_exc()}))

        for w, conn in conns.items():
            threading.Thread(target=reader, args=(w, conn), daemon=True).start()
        done = _serve(coord, inbox, lambda w, tag, p: conns[w].sendall(encode_frame(tag, p)),
                      plan.n_workers, trace)
    finally:
        for conn in conns.values():
            conn.close()
        server.close()
        for p in procs:
            p.join(timeout=10)
            if p.is_alive():
                p.terminate()
    st, timings, busy = _merge_done(done, coord)
    return RunResult(grid, st, timings, busy, time.perf_counter() - t0, trace.ordered(), coord.reports)


def run(grid, characters, setup: SimSetup, plan: Plan, workers: int = 0, transport: str = "inproc",
        on_frame=None, delay=None) -> RunResult:
    if workers == 0:
        return run_serial(grid, characters, setup, plan, on_frame)
    if plan.n_workers != workers:
        raise SchedulerError(f"plan was built for {plan.n_workers} workers, asked for {workers}")
    if transport == "inproc":
        return run_inproc(grid, characters, setup, plan, on_frame, delay)
    if transport == "stream":
        return run_stream(grid, characters, setup, plan, on_frame, delay)
    raise SchedulerError(f"unknown transport {transport!r}")
