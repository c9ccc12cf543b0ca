"""Tone container and WAV I/O."""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from .errors import UnreadableFile, UnsupportedEncoding

F1_HZ = 43.65
N_NOTES = 74  # F1 .. F#7


def note_to_f0(note_number):
    return F1_HZ * 2.0 ** (note_number / 12.0)


@dataclass
class Tone:
    samples: np.ndarray
    sample_rate_hz: int
    note_number: int
    f0_hz: float = field(default=None)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("tone samples must be a nonempty 1-D sequence")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError("sample rate must be positive")
        self.sample_rate_hz = int(self.sample_rate_hz)
        if not 0 <= int(self.note_number) < N_NOTES:
            raise ValueError(f"note number {self.note_number} outside 0..{N_NOTES - 1}")
        self.note_number = int(self.note_number)
        if self.f0_hz is None:
            self.f0_hz = note_to_f0(self.note_number)

    @property
    def duration_s(self):
        return self.samples.size / self.sample_rate_hz

    def scaled(self, c):
        return Tone(self.samples * c, self.sample_rate_hz, self.note_number, self.f0_hz)


def _umask():
    old = os.umask(0)
    os.umask(old)
    return old


_FILE_MODE = 0o666 & ~_umask()


def atomic_write_bytes(path, data: bytes):
    """Write via a sibling temp file and rename, so readers never see a partial file."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, _FILE_MODE)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_wav(path, tone_or_samples, sample_rate_hz=None):
    """Write mono 32-bit float little-endian PCM."""
    import io

    if isinstance(tone_or_samples, Tone):
        samples, sr = tone_or_samples.samples, tone_or_samples.sample_rate_hz
    else:
        samples, sr = np.asarray(tone_or_samples), int(sample_rate_hz)
    buf = io.BytesIO()
    wavfile.write(buf, sr, samples.astype("<f4"))
    atomic_write_bytes(path, buf.getvalue())


def read_wav(path):
    """Return (samples as float64 in [-1, 1], sample rate); first channel if multichannel."""
    try:
        sr, data = wavfile.read(os.fspath(path))
    except FileNotFoundError as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc
    except ValueError as exc:
        msg = str(exc).lower()
        if "unsupported" in msg or "not understood" in msg or "bit depth" in msg:
            raise UnsupportedEncoding(f"{path}: {exc}") from exc
        raise UnreadableFile(f"{path}: {exc}") from exc
    except OSError as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc
    if data.ndim == 2:
        data = data[:, 0]
    if data.dtype == np.uint8:
        x = (data.astype(float) - 128.0) / 128.0
    elif data.dtype == np.int16:
        x = data.astype(float) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(float) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(float)
    else:
        raise UnsupportedEncoding(f"{path}: sample type {data.dtype}")
    if x.size == 0:
        raise UnreadableFile(f"{path}: no samples")
    return x, int(sr)
