"""
Threaded real-time receiver.

Thread roles mirror a core-pinned baseband server: one scheduler, ``ingest``
UDP readers (each owning a contiguous share of the antennas), ``workers``
slot processors and one result emitter. Slot buffers move from the ingest
side to exactly one worker; the weight bank and frame plan are shared
read-only through the :class:`ReceiverChain`.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import socket
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from ..grid import SlotBuffer, SystemConfig, slot_length
from .chain import ReceiverChain, SlotResult
from .wire import (FLAG_FRAGMENTED, FRAG_HEADER_LEN, FRAG_INDEX, FRAGMENT_PAYLOAD, HEADER,
                   HEADER_LEN, MAGIC, WIRE_DTYPE, UdpSymbolPacket, fragment_count)

log = logging.getLogger(__name__)

RECV_BUFFER_BYTES = 16 * 1024 * 1024


def parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return (host or "127.0.0.1"), int(port)


class SlotTask:
    """One slot being filled: raw wire bytes plus fragment/completion tracking."""

    __slots__ = ("frame_id", "slot_id", "raw", "buffer", "frag_masks", "remaining",
                 "halves_done", "state", "stamps")

    def __init__(self, cfg: SystemConfig, frame_id: int, slot_id: int, groups: list[int]):
        self.frame_id = frame_id
        self.slot_id = slot_id
        self.raw = bytearray(slot_length(cfg) * WIRE_DTYPE.itemsize)
        self.buffer = SlotBuffer(cfg, data=np.frombuffer(self.raw, dtype=WIRE_DTYPE))
        self.frag_masks = [0] * (cfg.R * cfg.symbols_per_slot)
        self.remaining = [n * cfg.symbols_per_slot for n in groups]
        self.halves_done = 0
        self.state = "filling"
        self.stamps = {"created": time.perf_counter()}

    @property
    def key(self) -> tuple[int, int]:
        return self.frame_id, self.slot_id

    @property
    def ready(self) -> bool:
        return self.buffer.ready


class SlotStore:
    """Shared ingest state: open slots, eviction window and counters.

    Packets for frames older than ``window`` frames behind the newest are
    dropped as late; open slots falling out of the window are evicted and
    counted as overruns.
    """

    def __init__(self, cfg: SystemConfig, n_groups: int = 2, window: int = 3):
        self.cfg = cfg
        n_groups = max(1, min(n_groups, cfg.R))
        per = -(-cfg.R // n_groups)
        self.antenna_group = [a // per for a in range(cfg.R)]
        self.groups = [self.antenna_group.count(g) for g in range(max(self.antenna_group) + 1)]
        self.n_frags = fragment_count(8 * cfg.N)
        self.full_mask = (1 << self.n_frags) - 1
        self.window = window
        self.tasks: dict[tuple[int, int], SlotTask] = {}
        self.completed: dict[tuple[int, int], int] = {}
        self.newest = -1
        self.lock = threading.Lock()
        self.counters: Counter = Counter()

    def count(self, key: str, n: int = 1) -> None:
        with self.lock:
            self.counters[key] += n

    def _open(self, frame_id: int, slot_id: int) -> SlotTask | None:
        key = (frame_id, slot_id)
        with self.lock:
            task = self.tasks.get(key)
            if task is not None:
                return task
            if key in self.completed:
                self.counters["late_after_dispatch"] += 1
                return None
            if frame_id > self.newest:
                self.newest = frame_id
                self._evict(frame_id - self.window + 1)
            elif frame_id <= self.newest - self.window:
                self.counters["late_dropped"] += 1
                return None
            task = SlotTask(self.cfg, frame_id, slot_id, self.groups)
            self.tasks[key] = task
            return task

    def _evict(self, oldest_kept: int) -> None:
        for key in [k for k in self.tasks if k[0] < oldest_kept]:
            task = self.tasks.pop(key)
            if task.state == "filling":
                task.state = "evicted"
                self.counters["overrun_evicted"] += 1
                log.warning("slot %s evicted before completion", key)
        for key in [k for k in self.completed if k[0] < oldest_kept - 1]:
            del self.completed[key]

    def claim(self, task: SlotTask) -> bool:
        """Move a complete slot out of the ingest side; False if it was evicted."""
        with self.lock:
            if task.state != "filling":
                return False
            task.state = "ready"
            self.tasks.pop(task.key, None)
            self.completed[task.key] = task.frame_id
            return True

    def ingest(self, data, nbytes: int | None = None) -> tuple[SlotTask, int] | None:
        """Validate one datagram and copy its payload into the slot layout.

        Returns ``(task, group)`` when this datagram completed every
        (antenna, symbol) of that antenna group, else None.
        """
        cfg = self.cfg
        n = len(data) if nbytes is None else nbytes
        if n < HEADER_LEN:
            self.count("rejected")
            return None
        magic, frame_id, slot_id, sym, ant, flags, plen = HEADER.unpack_from(data)
        if (magic != MAGIC or slot_id >= cfg.slots_per_frame or sym >= cfg.symbols_per_slot
                or ant >= cfg.R or plen != 8 * cfg.N):
            self.count("rejected")
            return None
        if flags & FLAG_FRAGMENTED:
            if n < FRAG_HEADER_LEN:
                self.count("rejected")
                return None
            frag = FRAG_INDEX.unpack_from(data, HEADER_LEN)[0]
            start, off = FRAG_HEADER_LEN, frag * FRAGMENT_PAYLOAD
            length = n - start
            if frag >= self.n_frags or length != min(FRAGMENT_PAYLOAD, plen - off):
                self.count("rejected")
                return None
        else:
            frag, start, off = 0, HEADER_LEN, 0
            length = n - start
            if length != plen or self.n_frags != 1:
                self.count("rejected")
                return None
        task = self.tasks.get((frame_id, slot_id)) or self._open(frame_id, slot_id)
        if task is None:
            return None
        region = ant * cfg.symbols_per_slot + sym
        base = region * plen + off
        task.raw[base:base + length] = memoryview(data)[start:start + length]
        mask = task.frag_masks[region]
        bit = 1 << frag
        if mask & bit:
            self.count("duplicates")
            if mask == self.full_mask:
                log.warning("duplicate symbol frame=%d slot=%d sym=%d ant=%d", frame_id, slot_id, sym, ant)
            return None
        mask |= bit
        task.frag_masks[region] = mask
        if mask == self.full_mask:
            task.buffer.filled[ant, sym] = True
            g = self.antenna_group[ant]
            task.remaining[g] -= 1
            if task.remaining[g] == 0:
                return task, g
        return None


def ingest_packet(pkt: UdpSymbolPacket | bytes, state: SlotStore):
    """Place one packet (decoded or raw datagram) into the slot store."""
    if isinstance(pkt, UdpSymbolPacket):
        flags = FLAG_FRAGMENTED if pkt.fragment is not None else 0
        head = HEADER.pack(MAGIC, pkt.frame_id, pkt.slot_id, pkt.symbol_id, pkt.antenna_id,
                           flags, pkt.payload_len)
        if pkt.fragment is not None:
            head += FRAG_INDEX.pack(pkt.fragment)
        pkt = head + pkt.payload
    return state.ingest(pkt)


@dataclass
class ReceiverStats:
    counters: dict
    slots_dispatched: int
    slots_processed: int
    results_emitted: int
    failed_slots: int
    worker_busy_s: list[float]
    elapsed_s: float
    slot_times_s: list[float] = field(default_factory=list)

    @property
    def overruns(self) -> int:
        return int(self.counters.get("overrun_evicted", 0) + self.counters.get("overrun_dispatch", 0))

    def as_dict(self) -> dict:
        return {"counters": dict(self.counters), "slots_dispatched": self.slots_dispatched,
                "slots_processed": self.slots_processed, "results_emitted": self.results_emitted,
                "failed_slots": self.failed_slots, "overruns": self.overruns,
                "elapsed_s": self.elapsed_s,
                "worker_utilization": (sum(self.worker_busy_s) / (len(self.worker_busy_s) * self.elapsed_s)
                                       if self.elapsed_s > 0 and self.worker_busy_s else 0.0)}


def _pin(core_index: int) -> None:
    try:
        cores = sorted(os.sched_getaffinity(0))
        os.sched_setaffinity(0, {cores[core_index % len(cores)]})
    except (AttributeError, OSError):
        pass


class Receiver:
    """Scheduler, ingest, worker and emitter threads around one :class:`ReceiverChain`.

    ``output`` is a path for line-delimited JSON records, ``udp://host:port``
    to send each record as a datagram, or None. ``on_result`` is called by
    the emitter thread for every :class:`SlotResult`.
    """

    def __init__(self, chain: ReceiverChain, listen: list[tuple[str, int]], workers: int = 18,
                 pin_cores: bool = True, output: str | None = None,
                 on_result: Callable[[SlotResult], None] | None = None, window: int = 3,
                 collect: bool = False):
        self.chain = chain
        self.cfg = chain.cfg
        self.n_workers = workers
        self.pin_cores = pin_cores
        self.output = output
        self.on_result = on_result
        self.collect = collect
        self.results: list[SlotResult] = []
        self.store = SlotStore(self.cfg, n_groups=len(listen), window=window)
        self.sockets = []
        for host, port in listen:
            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, RECV_BUFFER_BYTES)
            sock.bind((host, port))
            sock.settimeout(0.05)
            self.sockets.append(sock)
        self.control: queue.Queue = queue.Queue()
        self.work: queue.Queue = queue.Queue(maxsize=workers)
        self.emit: queue.Queue = queue.Queue()
        self._stop_ingest = threading.Event()
        self._threads: list[threading.Thread] = []
        self.dispatched = 0
        self.processed = 0
        self.emitted = 0
        self.failed = 0
        self.busy = [0.0] * workers
        self.slot_times: list[float] = []
        self._t0 = 0.0
        self._t1 = None

    @property
    def addresses(self) -> list[tuple[str, int]]:
        return [s.getsockname() for s in self.sockets]

    # -- threads --------------------------------------------------------

    def _ingest_loop(self, index: int) -> None:
        if self.pin_cores:
            _pin(1 + index)
        sock = self.sockets[index]
        buf = bytearray(65536)
        store = self.store
        control = self.control
        while not self._stop_ingest.is_set():
            try:
                n = sock.recv_into(buf)
            except socket.timeout:
                continue
            except OSError:
                break
            store.count("datagrams")
            done = store.ingest(buf, n)
            if done is not None:
                control.put(("half", done[0]))

    def _scheduler_loop(self) -> None:
        if self.pin_cores:
            _pin(0)
        n_groups = len(self.store.groups)
        while True:
            msg = self.control.get()
            kind = msg[0]
            if kind == "stop":
                break
            if kind == "half":
                task = msg[1]
                task.halves_done += 1
                if task.halves_done == n_groups and self.store.claim(task):
                    task.stamps["ready"] = time.perf_counter()
                    try:
                        self.work.put_nowait(task)
                        self.dispatched += 1
                    except queue.Full:
                        self.store.count("overrun_dispatch")
                        log.warning("no idle worker for slot %s", task.key)
            elif kind == "done":
                self.processed += 1

    def _worker_loop(self, index: int) -> None:
        if self.pin_cores:
            _pin(1 + len(self.sockets) + index)
        while True:
            task = self.work.get()
            if task is None:
                break
            t0 = time.perf_counter()
            result = self.chain.process_slot(task.buffer, task.frame_id, task.slot_id)
            dt = time.perf_counter() - t0
            self.busy[index] += dt
            self.emit.put(result)
            self.control.put(("done", task.key))

    def _emitter_loop(self) -> None:
        if self.pin_cores:
            _pin(1 + len(self.sockets) + self.n_workers)
        fh = sock = None
        dest = None
        if self.output and self.output.startswith("udp://"):
            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            dest = parse_endpoint(self.output[len("udp://"):])
        elif self.output:
            fh = open(self.output, "w")
        try:
            while True:
                result = self.emit.get()
                if result is None:
                    break
                self.emitted += 1
                if not result.ok:
                    self.failed += 1
                else:
                    self.slot_times.append(result.timings.get("total", 0.0))
                if self.collect:
                    self.results.append(result)
                if self.on_result is not None:
                    self.on_result(result)
                for rec in result.records():
                    line = json.dumps(rec)
                    if fh is not None:
                        fh.write(line + "\n")
                    elif sock is not None:
                        sock.sendto(line.encode(), dest)
        finally:
            if fh is not None:
                fh.close()
            if sock is not None:
                sock.close()

    # -- lifecycle ------------------------------------------------------

    def start(self) -> "Receiver":
        self._t0 = time.perf_counter()
        spawn = [("scheduler", self._scheduler_loop, ()), ("emitter", self._emitter_loop, ())]
        spawn += [(f"ingest-{i}", self._ingest_loop, (i,)) for i in range(len(self.sockets))]
        spawn += [(f"slot-{i}", self._worker_loop, (i,)) for i in range(self.n_workers)]
        for name, target, args in spawn:
            t = threading.Thread(target=target, args=args, name=name, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def wait_idle(self, expected_slots: int | None = None, timeout: float = 30.0,
                  quiet: float = 0.5) -> None:
        """Block until ``expected_slots`` results exist or nothing changed for ``quiet`` s."""
        deadline = time.perf_counter() + timeout
        last, last_change = -1, time.perf_counter()
        while time.perf_counter() < deadline:
            n = self.emitted + self.store.counters["datagrams"]
            if expected_slots is not None and self.emitted >= expected_slots:
                return
            if n != last:
                last, last_change = n, time.perf_counter()
            elif expected_slots is None and time.perf_counter() - last_change > quiet:
                return
            time.sleep(0.01)

    def stop(self) -> ReceiverStats:
        self._stop_ingest.set()
        for t in self._threads:
            if t.name.startswith("ingest"):
                t.join()
        for s in self.sockets:
            s.close()
        self.control.put(("stop",))
        self._join("scheduler")
        for _ in range(self.n_workers):
            self.work.put(None)
        for t in self._threads:
            if t.name.startswith("slot"):
                t.join()
        while True:  # completions posted after the scheduler stopped
            try:
                msg = self.control.get_nowait()
            except queue.Empty:
                break
            if msg[0] == "done":
                self.processed += 1
        self.emit.put(None)
        self._join("emitter")
        self._t1 = time.perf_counter()
        counters = dict(self.store.counters)
        counters["incomplete_at_stop"] = sum(1 for t in self.store.tasks.values() if t.state == "filling")
        return ReceiverStats(counters, self.dispatched, self.processed, self.emitted, self.failed,
                             list(self.busy), self._t1 - self._t0, list(self.slot_times))

    def _join(self, name: str) -> None:
        for t in self._threads:
            if t.name == name:
                t.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def run_receiver(cfg: SystemConfig, listen_endpoints: list[tuple[str, int]], estimator: str = "12w",
                 detector: str = "mmse", duration: float | None = None, **kwargs) -> Iterator[SlotResult]:
    """Run the receiver and yield results as they are emitted.

    Stops after ``duration`` seconds (or when the consumer stops iterating).
    """
    bank = kwargs.pop("bank", None)
    chain = ReceiverChain(cfg, estimator, detector, bank=bank)
    out: queue.Queue = queue.Queue()
    rx = Receiver(chain, listen_endpoints, on_result=out.put, **kwargs).start()
    t_end = None if duration is None else time.perf_counter() + duration
    try:
        while t_end is None or time.perf_counter() < t_end:
            try:
                yield out.get(timeout=0.1)
            except queue.Empty:
                continue
    finally:
        rx.stop()
        while not out.empty():
            out.get_nowait()
