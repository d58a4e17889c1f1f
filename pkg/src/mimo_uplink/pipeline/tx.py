"""Transmitter emulator: streams post-FFT slot data over UDP in place of the radio front end."""

from __future__ import annotations

import socket
import time
from dataclasses import dataclass, field

import numpy as np

from ..channel import NoiseSpec, apply_channel, draw_channel, identity_channel
from ..errors import ConfigurationError
from ..grid import SystemConfig
from .chain import PAYLOAD_SEED, PILOT_SEED, SlotSynthesizer
from .wire import (FLAG_FRAGMENTED, FRAG_INDEX, FRAGMENT_PAYLOAD, HEADER, HEADER_LEN, MAGIC,
                   MAX_DATAGRAM, WIRE_DTYPE)

CHANNEL_MODES = ("identity", "multipath")


@dataclass
class TxReport:
    frames: int
    datagrams: int
    elapsed_s: float
    grids: dict = field(default_factory=dict)
    channels: dict = field(default_factory=dict)


class TxEmulator:
    """Generates frames, applies the channel and packetizes every (antenna, symbol).

    Antenna ``a`` is sent to ``dest[a * len(dest) // R]`` so each receiver
    ingest socket sees a contiguous share of the antennas. Frames are paced
    at ``pace_ms`` (default: the frame duration) with slots spread evenly.
    """

    def __init__(self, cfg: SystemConfig, dest: list[tuple[str, int]], channel_mode: str = "identity",
                 snr_db: float | None = None, timing_error: int = 0, seed: int = 1,
                 pace_ms: float | None = None, pilot_seed: int = PILOT_SEED,
                 payload_seed: int = PAYLOAD_SEED):
        if channel_mode not in CHANNEL_MODES:
            raise ConfigurationError(f"unknown channel mode {channel_mode!r}")
        self.cfg = cfg
        self.dest = list(dest)
        self.channel_mode = channel_mode
        self.noise = None if snr_db is None else NoiseSpec(snr_db)
        self.timing_error = timing_error
        self.seed = seed
        self.pace_ms = cfg.frame_ms if pace_ms is None else pace_ms
        self.synth = SlotSynthesizer(cfg, pilot_seed, payload_seed)
        self._identity = identity_channel(cfg)
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, 4 * 1024 * 1024)
        self._route = [self.dest[a * len(self.dest) // cfg.R] for a in range(cfg.R)]

    def slot_grid(self, frame_id: int, slot_id: int):
        """Received (R, 3, N) grid of one slot and the channel that produced it."""
        rng = np.random.default_rng([self.seed, frame_id, slot_id])
        chan = self._identity if self.channel_mode == "identity" else draw_channel(self.cfg, rng)
        rx = apply_channel(self.synth.tx_grid(frame_id, slot_id), chan, self.noise,
                           self.timing_error, rng, n_fft=self.cfg.N_FFT)
        return rx, chan

    def send_slot(self, frame_id: int, slot_id: int, grid: np.ndarray) -> int:
        cfg = self.cfg
        wire = np.ascontiguousarray(grid, dtype=WIRE_DTYPE).tobytes()
        view = memoryview(wire)
        plen = 8 * cfg.N
        fragmented = HEADER_LEN + plen > MAX_DATAGRAM
        sent = 0
        sendto = self.sock.sendto
        for a in range(cfg.R):
            dest = self._route[a]
            for sym in range(cfg.symbols_per_slot):
                base = (a * cfg.symbols_per_slot + sym) * plen
                if not fragmented:
                    head = HEADER.pack(MAGIC, frame_id, slot_id, sym, a, 0, plen)
                    sendto(head + view[base:base + plen], dest)
                    sent += 1
                    continue
                head = HEADER.pack(MAGIC, frame_id, slot_id, sym, a, FLAG_FRAGMENTED, plen)
                for i, off in enumerate(range(0, plen, FRAGMENT_PAYLOAD)):
                    end = min(off + FRAGMENT_PAYLOAD, plen)
                    sendto(head + FRAG_INDEX.pack(i) + view[base + off:base + end], dest)
                    sent += 1
        return sent

    def run(self, frames: int, first_frame: int = 0, keep: bool = False) -> TxReport:
        cfg = self.cfg
        period = self.pace_ms / 1e3
        slot_gap = period / cfg.slots_per_frame
        report = TxReport(frames, 0, 0.0)
        t0 = time.perf_counter()
        for f in range(first_frame, first_frame + frames):
            for s in range(cfg.slots_per_frame):
                target = t0 + (f - first_frame) * period + s * slot_gap
                delay = target - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
                grid, chan = self.slot_grid(f, s)
                report.datagrams += self.send_slot(f, s, grid)
                if keep:
                    report.grids[(f, s)] = grid
                    report.channels[(f, s)] = chan
        end = t0 + frames * period
        delay = end - time.perf_counter()
        if delay > 0:
            time.sleep(delay)
        report.elapsed_s = time.perf_counter() - t0
        return report

    def close(self) -> None:
        self.sock.close()


def tx_emulator(cfg: SystemConfig, dest_endpoints: list[tuple[str, int]], frames: int,
                channel_mode: str = "identity", **kwargs) -> TxReport:
    keep = kwargs.pop("keep", False)
    tx = TxEmulator(cfg, dest_endpoints, channel_mode, **kwargs)
    try:
        return tx.run(frames, keep=keep)
    finally:
        tx.close()
