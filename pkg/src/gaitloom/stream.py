"""Real-time inference simulator: framed ingestion, ring buffering, stepping.

Frames carry 50 ms of samples over a simple binary wire (magic 'GLFR', u32
sequence number, u16 sample count, f32 little-endian payload, no padding).
Samples are filtered incrementally with persistent state as they arrive, so a
replayed recording reproduces the offline preprocessing bit for bit; a
prediction is emitted every 50 ms once the 1 s window is full and free of
sequence gaps.
"""

from __future__ import annotations

import json
import socket
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from .activation import ActivationMask, window_weights
from .autodiff import Tensor, no_grad
from .dataset import N_CHANNELS, Recording
from .model import ModelBundle, predict_timing
from .sigproc import ChannelStats, PreprocessConfig, StreamingPreprocessor

FRAME_MAGIC = b"GLFR"
FRAME_HEADER = struct.Struct("<4sIH")
DEFAULT_FRAME_SAMPLES = 60  # 50 ms at 1200 Hz


class ProtocolError(ValueError):
    """Malformed frame on the wire (connection-level failure)."""


@dataclass(frozen=True)
class Frame:
    seq: int
    payload: np.ndarray  # [n_samples x 8] float32

    @property
    def n_samples(self) -> int:
        return self.payload.shape[0]


def encode_frame(frame: Frame) -> bytes:
    payload = np.ascontiguousarray(frame.payload, dtype="<f4")
    if payload.ndim != 2 or payload.shape[1] != N_CHANNELS:
        raise ProtocolError(f"payload must be [n x {N_CHANNELS}]")
    return FRAME_HEADER.pack(FRAME_MAGIC, frame.seq, payload.shape[0]) + payload.tobytes()


class FrameParser:
    """Incremental decoder for a byte stream of frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf.extend(data)
        frames = []
        while True:
            if len(self._buf) < FRAME_HEADER.size:
                break
            magic, seq, n = FRAME_HEADER.unpack_from(self._buf, 0)
            if magic != FRAME_MAGIC:
                raise ProtocolError(f"bad frame magic {magic!r}")
            body = 4 * n * N_CHANNELS
            if len(self._buf) < FRAME_HEADER.size + body:
                break
            raw = bytes(self._buf[FRAME_HEADER.size : FRAME_HEADER.size + body])
            del self._buf[: FRAME_HEADER.size + body]
            payload = np.frombuffer(raw, dtype="<f4").reshape(n, N_CHANNELS)
            frames.append(Frame(seq=seq, payload=payload))
        return frames

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


class RingBuffer:
    """Fixed-capacity sample ring; reads of a full window see the last
    ``capacity`` samples in arrival order."""

    def __init__(self, capacity: int = 1200, channels: int = N_CHANNELS):
        self.capacity = capacity
        self._buf = np.zeros((capacity, channels))
        self._cursor = 0
        self.filled = 0

    def push(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows)
        if rows.shape[0] >= self.capacity:  # keep only the newest samples
            self._buf[:] = rows[-self.capacity :]
            self._cursor = 0
            self.filled = self.capacity
            return
        n = rows.shape[0]
        end = self._cursor + n
        if end <= self.capacity:
            self._buf[self._cursor : end] = rows
        else:
            k = self.capacity - self._cursor
            self._buf[self._cursor :] = rows[:k]
            self._buf[: end - self.capacity] = rows[k:]
        self._cursor = end % self.capacity
        self.filled = min(self.capacity, self.filled + n)

    def window(self) -> np.ndarray:
        if self.filled < self.capacity:
            raise ValueError("ring buffer not yet full")
        return np.concatenate([self._buf[self._cursor :], self._buf[: self._cursor]], axis=0)


@dataclass
class Prediction:
    t_index: int        # sample index the predicted angle refers to
    angle_deg: float
    latency_ms: float


@dataclass
class GapEvent:
    expected_seq: int
    got_seq: int
    at_sample: int


class StreamEngine:
    """Single-producer/single-consumer inference loop over a sample stream.

    Every ingested frame is filtered with persistent per-channel state and
    appended to the ring; once 50 ms of new samples have accumulated and the
    buffer holds a full, gap-free window, one prediction is emitted for the
    instant 50 ms past the window end.
    """

    def __init__(
        self,
        bundle: ModelBundle,
        stats: ChannelStats,
        mask: Optional[ActivationMask] = None,
        pconfig: PreprocessConfig = PreprocessConfig(),
        window: int = 1200,
        emit_every: int = DEFAULT_FRAME_SAMPLES,
        horizon: int = 60,
    ):
        if bundle.flags.mask_filter and mask is None:
            raise ValueError("bundle uses mask filtering but no mask was given")
        self.bundle = bundle
        self.mask = mask
        self.pre = StreamingPreprocessor(pconfig, stats)
        self.ring = RingBuffer(window, N_CHANNELS)
        self.emit_every = emit_every
        self.horizon = horizon
        self.expected_seq: Optional[int] = None
        self.gap_events: list[GapEvent] = []
        self.fresh = 0            # consecutive gap-free samples
        self._pending = 0         # samples since the last emission
        self.total_samples = 0
        self.latencies_ms: list[float] = []

    def ingest(self, frame: Frame) -> list[Prediction]:
        if frame.n_samples != frame.payload.shape[0]:
            raise ProtocolError("frame header/payload mismatch")
        if self.expected_seq is not None and frame.seq != self.expected_seq:
            self.gap_events.append(GapEvent(self.expected_seq, frame.seq, self.total_samples))
            self.fresh = 0  # stale until a full window of fresh samples arrives
        self.expected_seq = frame.seq + 1

        filtered = self.pre.process(frame.payload.astype(np.float64))
        self.ring.push(filtered)
        self.total_samples += frame.n_samples
        self.fresh += frame.n_samples
        self._pending += frame.n_samples

        out = []
        while self._pending >= self.emit_every:
            self._pending -= self.emit_every
            pred = self.step()
            if pred is not None:
                out.append(pred)
        return out

    def step(self) -> Optional[Prediction]:
        if self.ring.filled < self.ring.capacity or self.fresh < self.ring.capacity:
            return None
        t0 = time.perf_counter()
        window = self.ring.window()
        x = window.astype(np.float32)[None, None, :, :]
        flags = self.bundle.flags
        if flags.mask_filter:
            t_hat = predict_timing(self.bundle.timing, x)[0]
            w = window_weights(self.mask, t_hat[0], t_hat[1], self.ring.capacity)
            x = (x * w[None, None, :, :]).astype(np.float32)
        self.bundle.main.eval()
        with no_grad():
            out = self.bundle.main(Tensor(x))
            if flags.decoupling:
                angle = float(out.amplitude.data[0, 0] * out.pattern.data[0] + out.amplitude.data[0, 1])
            else:
                angle = float(out.angle.data[0])
        latency = (time.perf_counter() - t0) * 1000.0
        self.latencies_ms.append(latency)
        return Prediction(t_index=self.total_samples + self.horizon, angle_deg=angle,
                          latency_ms=latency)

    def latency_summary(self) -> dict[str, float]:
        if not self.latencies_ms:
            return {"count": 0, "p50_ms": 0.0, "p95_ms": 0.0, "max_ms": 0.0}
        arr = np.asarray(self.latencies_ms)
        return {
            "count": int(arr.size),
            "p50_ms": float(np.percentile(arr, 50)),
            "p95_ms": float(np.percentile(arr, 95)),
            "max_ms": float(arr.max()),
        }


def replay(rec: Recording, rate: Optional[float] = None,
           frame_samples: int = DEFAULT_FRAME_SAMPLES, start_seq: int = 0) -> Iterator[Frame]:
    """Frame stream from a recording; a trailing partial frame is dropped.

    rate None replays as fast as possible; rate r sleeps frame_duration / r
    between frames (r=1 is real time).
    """
    n_frames = rec.n_samples // frame_samples
    delay = (frame_samples / rec.fs) / rate if rate else 0.0
    for i in range(n_frames):
        if delay:
            time.sleep(delay)
        chunk = rec.emg[i * frame_samples : (i + 1) * frame_samples].astype(np.float32)
        yield Frame(seq=start_seq + i, payload=chunk)


def run_replay(engine: StreamEngine, rec: Recording, rate: Optional[float] = None,
               frame_samples: int = DEFAULT_FRAME_SAMPLES) -> list[Prediction]:
    preds: list[Prediction] = []
    for frame in replay(rec, rate=rate, frame_samples=frame_samples):
        preds.extend(engine.ingest(frame))
    return preds


def serve(engine: StreamEngine, host: str = "127.0.0.1", port: int = 0,
          on_prediction: Optional[Callable[[Prediction], None]] = None,
          ready: Optional[Callable[[int], None]] = None) -> list[Prediction]:
    """Accept one connection, ingest frames until EOF, return predictions."""
    preds: list[Prediction] = []
    parser = FrameParser()
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as srv:
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((host, port))
        srv.listen(1)
        if ready is not None:
            ready(srv.getsockname()[1])
        conn, _ = srv.accept()
        with conn:
            while True:
                data = conn.recv(65536)
                if not data:
                    break
                for frame in parser.feed(data):
                    for p in engine.ingest(frame):
                        preds.append(p)
                        if on_prediction is not None:
                            on_prediction(p)
    return preds


def predictions_to_json(preds: list[Prediction], engine: StreamEngine) -> str:
    return json.dumps({
        "predictions": [
            {"t_index": p.t_index, "angle_deg": p.angle_deg, "latency_ms": p.latency_ms}
            for p in preds
        ],
        "latency": engine.latency_summary(),
        "gap_events": [
            {"expected_seq": g.expected_seq, "got_seq": g.got_seq, "at_sample": g.at_sample}
            for g in engine.gap_events
        ],
    }, indent=2)
