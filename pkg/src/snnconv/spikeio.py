"""Spike-camera emulation: encoders, gray reconstruction, the ``.spk`` format,
PGM image I/O and a synthetic single-object scene generator.

``.spk`` layout (all little-endian)::

    offset size field
    0      4    magic  b"SPKS"
    4      2    version (1)
    6      1    encoder id (0 = integrate, 1 = bernoulli)
    7      1    reserved, 0
    8      4    width  W
    12     4    height H
    16     4    steps  T
    20     4    camera threshold (float32, normalized intensity)
    24     8    seed (uint64; 0 for the integrate encoder)
    32     ...  T frames of ceil(W*H/8) bytes each

Within a frame, pixel p = row * W + col is bit (p % 8) of byte p // 8
(LSB-first); unused trailing bits are zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import StreamFormatError
from .snn import FIRE_EPS

MAGIC = b"SPKS"
VERSION = 1
HEADER = struct.Struct("<4sHBBIIIfQ")
ENCODER_IDS = {"integrate": 0, "bernoulli": 1}
ENCODER_NAMES = {v: k for k, v in ENCODER_IDS.items()}


@dataclass(frozen=True)
class SpikeStream:
    width: int
    height: int
    T: int
    encoder: str
    threshold: float
    seed: int
    payload: bytes

    def __post_init__(self):
        if len(self.payload) != self.T * self.frame_bytes:
            raise StreamFormatError(
                f"payload is {len(self.payload)} bytes, expected {self.T} x {self.frame_bytes}")

    @property
    def frame_bytes(self):
        return -(-self.width * self.height // 8)

    @classmethod
    def from_spikes(cls, spikes, encoder, threshold, seed=0):
        spikes = np.asarray(spikes, dtype=bool)
        T, h, w = spikes.shape
        packed = np.packbits(spikes.reshape(T, h * w), axis=1, bitorder="little")
        return cls(w, h, T, encoder, float(np.float32(threshold)), int(seed), packed.tobytes())

    def spikes(self) -> np.ndarray:
        """Unpacked spikes, shape (T, H, W), dtype bool."""
        raw = np.frombuffer(self.payload, dtype=np.uint8).reshape(self.T, self.frame_bytes)
        bits = np.unpackbits(raw, axis=1, count=self.width * self.height, bitorder="little")
        return bits.reshape(self.T, self.height, self.width).astype(bool)

    def rates(self) -> np.ndarray:
        return self.spikes().sum(axis=0) / self.T

    def to_bytes(self) -> bytes:
        head = HEADER.pack(MAGIC, VERSION, ENCODER_IDS[self.encoder], 0, self.width, self.height,
                           self.T, self.threshold, self.seed)
        return head + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "SpikeStream":
        if len(data) < HEADER.size:
            raise StreamFormatError("file shorter than the .spk header")
        magic, version, enc, reserved, w, h, T, thr, seed = HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise StreamFormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise StreamFormatError(f"unsupported .spk version {version}")
        if enc not in ENCODER_NAMES or reserved != 0:
            raise StreamFormatError(f"unknown encoder id {enc}")
        if w == 0 or h == 0 or not thr > 0:
            raise StreamFormatError("invalid header dimensions or threshold")
        stream = cls(w, h, T, ENCODER_NAMES[enc], thr, seed, bytes(data[HEADER.size:]))
        pad = stream.frame_bytes * 8 - w * h
        if pad:
            last = np.frombuffer(stream.payload, dtype=np.uint8)[stream.frame_bytes - 1::stream.frame_bytes]
            if np.any(last >> (8 - pad)):
                raise StreamFormatError("non-zero padding bits")
        return stream


def write_spk(stream: SpikeStream, path):
    Path(path).write_bytes(stream.to_bytes())


def read_spk(path) -> SpikeStream:
    return SpikeStream.from_bytes(Path(path).read_bytes())


def _frames(frames, T):
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.ndim != 3 or frames.shape[0] == 0:
        raise ValueError("frames must be a non-empty sequence of 2-D gray images")
    if np.any(frames < 0) or np.any(frames > 1) or not np.all(np.isfinite(frames)):
        raise ValueError("frame intensities must lie in [0, 1]")
    T = frames.shape[0] if T is None else int(T)
    if T < 1:
        raise ValueError("T must be >= 1")
    # step t shows frame floor(t * F / T): frames are held evenly across the stream
    idx = (np.arange(T) * frames.shape[0]) // T
    return frames, idx, T


def encode_integrate(frames, threshold=1.0, T=None) -> SpikeStream:
    """Accumulate intensity per pixel each step; spike and subtract ``threshold`` on crossing.

    At most one spike per pixel per step, so pixels brighter than
    ``threshold`` saturate at rate 1.
    """
    if not 0 < threshold <= 1:
        raise ValueError(f"camera threshold must be in (0, 1], got {threshold}")
    frames, idx, T = _frames(frames, T)
    acc = np.zeros(frames.shape[1:])
    out = np.zeros((T,) + frames.shape[1:], dtype=bool)
    thr = float(np.float32(threshold))
    for t in range(T):
        acc += frames[idx[t]]
        fired = acc >= thr * (1.0 - FIRE_EPS)
        acc -= thr * fired
        out[t] = fired
    return SpikeStream.from_spikes(out, "integrate", thr, 0)


def encode_bernoulli(frames, seed=0, T=None) -> SpikeStream:
    """Each pixel spikes independently with probability equal to its intensity."""
    frames, idx, T = _frames(frames, T)
    rng = np.random.default_rng(seed)
    out = np.zeros((T,) + frames.shape[1:], dtype=bool)
    for t in range(T):
        out[t] = rng.random(frames.shape[1:]) < frames[idx[t]]
    return SpikeStream.from_spikes(out, "bernoulli", 1.0, seed)


def reconstruct_gray(stream: SpikeStream) -> np.ndarray:
    """threshold * count / T per pixel, clipped to [0, 1]."""
    return np.clip(stream.threshold * stream.rates(), 0.0, 1.0)


# -- PGM (binary P5) ------------------------------------------------------------

def write_pgm(image, path, maxval=255):
    img = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    h, w = img.shape
    data = np.round(img * maxval).astype(">u2" if maxval > 255 else np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Binary PGM to a float image in [0, 1]."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise StreamFormatError("only binary PGM (P5) is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = ">u2" if maxval > 255 else np.uint8
    img = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return img.astype(np.float64) / maxval


# -- synthetic scenes -----------------------------------------------------------

SCENE_SIZE = 32
CONTRAST = 0.3


def synth_detection_scene(seed, count, size=SCENE_SIZE):
    """Single-object gray scenes on a smooth textured background.

    Returns ``(frames, labels)``: frames ``(count, size, size)`` in [0, 1] and
    labels ``(count, 5)`` rows of (cx, cy, w, h, class) in pixels, class 0 for
    rectangles and 1 for discs. Object intensity is at least ``CONTRAST``
    above the background mean by construction.
    """
    rng = np.random.default_rng(seed)
    frames = np.zeros((count, size, size))
    labels = np.zeros((count, 5))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for i in range(count):
        # low-frequency texture in [0.05, 0.35]
        block = -(-size // 4)
        tex = np.kron(rng.random((5, 5)), np.ones((block, block)))[:size, :size]
        bg = 0.05 + 0.2 * tex + 0.1 * rng.random((size, size))
        w = rng.integers(8, 17)
        h = rng.integers(8, 17)
        x0 = rng.integers(0, size - w + 1)
        y0 = rng.integers(0, size - h + 1)
        cls = int(rng.integers(0, 2))
        if cls == 0:
            mask = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
        else:
            cx, cy = x0 + w / 2, y0 + h / 2
            mask = ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0
        level = max(rng.uniform(0.75, 1.0), bg.mean() + CONTRAST + 0.05)
        img = bg.copy()
        img[mask] = np.clip(level + 0.05 * rng.standard_normal(mask.sum()), 0, 1)
        frames[i] = np.clip(img, 0, 1)
        labels[i] = (x0 + w / 2, y0 + h / 2, w, h, cls)
    return frames, labels
