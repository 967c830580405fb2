"""Keyless fragile spread-spectrum watermark for 16-bit mono PCM.

Each bit occupies one block of ``chips_per_bit`` samples and adds
``strength * rms(signal) * (2b - 1) * chip`` where the ±1 chips come from a
fixed public seed, so anyone can detect. The detector prewhitens both the
signal and the chips with a second-difference filter, takes the Pearson
correlation per block, and reads each bit from its sign.

Frame layout (bits, MSB first)::

    sync word (32) | payload length in bytes (16) | payload

The frame repeats cyclically to fill the carrier. Extraction succeeds only
if the sync word is found, every repetition's mean |correlation| clears the
threshold, repeated copies of each bit agree, and no block is an erasure
(zero energy). Anything else is reported as absence.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from cryptography import x509

from .errors import BadSignature, InvalidArgument, PayloadTooLarge, PurposeViolation, ResolutionError
from .pki import EkuPurpose, TrustChain, cert_purposes
from .signing import ecdsa_sign, ecdsa_verify

PUBLIC_SEED = 0x414D50  # fixed and published: detection needs no key
SYNC_WORD = 0xB5E39A1D
SYNC_BITS = 32
LENGTH_BITS = 16
HEADER_BITS = SYNC_BITS + LENGTH_BITS
DEFAULT_CHIPS_PER_BIT = 512
DEFAULT_STRENGTH = 0.03  # watermark RMS / signal RMS, about -30.5 dB
DETECTION_THRESHOLD = 0.3
MAX_FIELD_BYTES = 255
SIGNATURE_BYTES = 64
_WHITEN = np.array([1.0, -2.0, 1.0])


@dataclass(frozen=True)
class EmbedParams:
    chips_per_bit: int = DEFAULT_CHIPS_PER_BIT
    strength: float = DEFAULT_STRENGTH
    seed: int = PUBLIC_SEED
    threshold: float = DETECTION_THRESHOLD

    def __post_init__(self):
        if self.chips_per_bit < 1:
            raise InvalidArgument("chips_per_bit must be >= 1")
        if not self.strength > 0:
            raise InvalidArgument("strength must be > 0")


@dataclass(frozen=True)
class WatermarkPayload:
    media_id: bytes
    master_copy_locator: str
    signature: bytes

    def signed_bytes(self) -> bytes:
        return self.media_id + self.master_copy_locator.encode("utf-8")

    def to_bytes(self) -> bytes:
        loc = self.master_copy_locator.encode("utf-8")
        return bytes([len(self.media_id)]) + self.media_id + bytes([len(loc)]) + loc + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> "WatermarkPayload":
        try:
            n = data[0]
            media_id = data[1 : 1 + n]
            m = data[1 + n]
            loc = data[2 + n : 2 + n + m]
            sig = data[2 + n + m :]
        except IndexError:
            raise InvalidArgument("truncated watermark payload") from None
        if len(media_id) != n or len(loc) != m or len(sig) != SIGNATURE_BYTES:
            raise InvalidArgument("watermark payload fields do not add up")
        return cls(bytes(media_id), loc.decode("utf-8"), bytes(sig))


@dataclass(frozen=True)
class EmbedResult:
    samples: np.ndarray  # int16
    bits_embedded: int  # carrier blocks used, counting repetitions
    frame_bits: int
    repetitions: float
    watermark_db: float  # watermark energy relative to signal energy


@dataclass(frozen=True)
class Extraction:
    payload: bytes
    bits: np.ndarray
    mean_correlation: float
    correlations: np.ndarray


# --------------------------------------------------------------------------
# framing


def _to_bits(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))


def frame_bits(payload: bytes) -> np.ndarray:
    if len(payload) >= 1 << LENGTH_BITS:
        raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds the 16-bit length field")
    return _to_bits(struct.pack(">IH", SYNC_WORD, len(payload)) + payload)


def framed_length(payload_bytes: int) -> int:
    return HEADER_BITS + 8 * payload_bytes


def build_payload(media_id: bytes, locator: str, chain: TrustChain) -> tuple:
    """Sign MediaID || locator and frame it; returns (payload, bits)."""
    if not media_id:
        raise InvalidArgument("MediaID must not be empty")
    if len(media_id) > MAX_FIELD_BYTES:
        raise InvalidArgument(f"MediaID longer than {MAX_FIELD_BYTES} bytes")
    if len(locator.encode("utf-8")) > MAX_FIELD_BYTES:
        raise InvalidArgument(f"MasterCopyLocator longer than {MAX_FIELD_BYTES} bytes")
    if chain.leaf_key is None:
        raise InvalidArgument("chain has no private key")
    if EkuPurpose.MANIFEST_SIGNING not in cert_purposes(chain.leaf):
        raise PurposeViolation(f"{chain.name!r} is not authorized for manifest signing")
    unsigned = WatermarkPayload(media_id, locator, b"")
    payload = WatermarkPayload(media_id, locator, ecdsa_sign(chain.leaf_key, unsigned.signed_bytes()))
    return payload, frame_bits(payload.to_bytes())


def verify_payload(payload: WatermarkPayload, cert_resolver: Callable[[str], object]) -> tuple:
    """Check the payload signature under the certificate the locator resolves to."""
    try:
        cert = cert_resolver(payload.master_copy_locator)
    except Exception as exc:
        raise ResolutionError(f"cannot resolve {payload.master_copy_locator!r}: {exc}") from None
    if isinstance(cert, TrustChain):
        cert = cert.leaf
    if not isinstance(cert, x509.Certificate):
        raise ResolutionError(f"no certificate for {payload.master_copy_locator!r}")
    if not ecdsa_verify(cert.public_key(), payload.signature, payload.signed_bytes()):
        raise BadSignature("watermark payload signature does not verify")
    return payload.media_id, payload.master_copy_locator


# --------------------------------------------------------------------------
# carrier


def chip_sequence(length: int, seed: int = PUBLIC_SEED) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, size=length, dtype=np.int8) * 2 - 1


def capacity(num_samples: int, params: EmbedParams = EmbedParams()) -> int:
    return num_samples // params.chips_per_bit


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64)))) if len(x) else 0.0


def embed_pcm(samples, bits, params: EmbedParams = EmbedParams()) -> EmbedResult:
    """Add the framed ``bits`` to ``samples`` (repeating them across the carrier)."""
    x = np.asarray(samples, dtype=np.int16)
    bits = np.asarray(bits, dtype=np.uint8)
    cap = capacity(len(x), params)
    if len(bits) == 0:
        raise InvalidArgument("nothing to embed")
    if len(bits) > cap:
        raise PayloadTooLarge(
            f"{len(bits)} bits need {len(bits) * params.chips_per_bit} samples; carrier has {len(x)}"
        )
    span = cap * params.chips_per_bit
    laid = np.resize(bits, cap).astype(np.float64) * 2 - 1
    chips = chip_sequence(span, params.seed).astype(np.float64)
    amplitude = params.strength * _rms(x.astype(np.float64))
    mark = np.repeat(laid, params.chips_per_bit) * chips * amplitude
    y = x.astype(np.float64)
    y[:span] += mark
    out = np.clip(np.rint(y), -32768, 32767).astype(np.int16)
    added = out.astype(np.float64) - x
    signal_energy = float(np.sum(np.square(x, dtype=np.float64)))
    wm_energy = float(np.sum(np.square(added)))
    ratio_db = 10 * np.log10(wm_energy / signal_energy) if signal_energy and wm_energy else float("-inf")
    return EmbedResult(out, cap, len(bits), cap / len(bits), ratio_db)


def _whiten(x: np.ndarray) -> np.ndarray:
    return np.convolve(x, _WHITEN, mode="same")


def block_correlations(samples, params: EmbedParams = EmbedParams()) -> np.ndarray:
    """Pearson correlation of each prewhitened block with its prewhitened chips."""
    x = np.asarray(samples, dtype=np.float64)
    cap = capacity(len(x), params)
    if cap == 0:
        return np.zeros(0)
    span = cap * params.chips_per_bit
    y = _whiten(x)[:span].reshape(cap, params.chips_per_bit)
    c = _whiten(chip_sequence(span, params.seed).astype(np.float64)).reshape(cap, params.chips_per_bit)
    y = y - y.mean(axis=1, keepdims=True)
    c = c - c.mean(axis=1, keepdims=True)
    num = np.einsum("ij,ij->i", y, c)
    den = np.sqrt(np.einsum("ij,ij->i", y, y) * np.einsum("ij,ij->i", c, c))
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(den > 0, num / den, 0.0)
    # the filter smears neighbours into a silent block; judge erasure on the raw samples
    raw = x[:span].reshape(cap, params.chips_per_bit)
    rho[~np.any(raw, axis=1)] = 0.0
    return rho


def extract_pcm(samples, params: EmbedParams = EmbedParams()) -> Optional[Extraction]:
    """Recover the framed payload, or None when no watermark locks."""
    rho = block_correlations(samples, params)
    if len(rho) < HEADER_BITS or np.any(rho == 0.0):
        return None
    header = (rho[:HEADER_BITS] > 0).astype(np.uint8)
    sync, length = struct.unpack(">IH", np.packbits(header).tobytes())
    if sync != SYNC_WORD:
        return None
    frame = framed_length(length)
    if frame > len(rho):
        return None
    copies = [rho[i : i + frame] for i in range(0, len(rho), frame)]
    if any(np.mean(np.abs(c)) < params.threshold for c in copies):
        return None
    bits = (copies[0] > 0).astype(np.uint8)
    for c in copies[1:]:
        if np.any((c > 0).astype(np.uint8) != bits[: len(c)]):
            return None
    payload = np.packbits(bits[HEADER_BITS:]).tobytes()
    return Extraction(payload, bits, float(np.mean(np.abs(rho))), rho)


def extract_payload(samples, params: EmbedParams = EmbedParams()) -> Optional[WatermarkPayload]:
    found = extract_pcm(samples, params)
    if found is None:
        return None
    try:
        return WatermarkPayload.from_bytes(found.payload)
    except (InvalidArgument, UnicodeDecodeError):
        return None


def energy_ratio_db(original, marked) -> float:
    """Watermark energy relative to the original signal, in dB."""
    x = np.asarray(original, dtype=np.float64)
    d = np.asarray(marked, dtype=np.float64) - x
    return float(10 * np.log10(np.sum(d * d) / np.sum(x * x)))


# --------------------------------------------------------------------------
# WAV I/O and fixtures


def read_wav(path: str) -> tuple:
    """Return (int16 mono samples, sample rate)."""
    with wave.open(path, "rb") as w:
        if w.getsampwidth() != 2:
            raise InvalidArgument("only 16-bit PCM WAV is supported")
        rate, channels = w.getframerate(), w.getnchannels()
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    if channels > 1:
        data = data.reshape(-1, channels)[:, 0]
    return data.astype(np.int16), rate


def write_wav(path: str, samples, sample_rate: int = 44100) -> None:
    with wave.open(path, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(np.asarray(samples, dtype="<i2").tobytes())


def synth_music(num_samples: int, seed: int = 0, sample_rate: int = 44100, level: float = 0.25) -> np.ndarray:
    """Harmonic notes with decaying envelopes over a faint noise floor."""
    rng = np.random.default_rng(seed)
    t = np.arange(num_samples) / sample_rate
    out = np.zeros(num_samples)
    note_len = int(sample_rate * rng.uniform(0.2, 0.5))
    for start in range(0, num_samples, note_len):
        f0 = 110.0 * 2 ** (rng.integers(0, 36) / 12)
        seg = slice(start, min(num_samples, start + note_len))
        tt = t[seg] - t[start]
        env = np.exp(-tt * rng.uniform(2, 6))
        tone = sum((0.6 ** h) * np.sin(2 * np.pi * f0 * (h + 1) * tt + rng.uniform(0, 2 * np.pi)) for h in range(5))
        out[seg] += env * tone
    out += rng.normal(0, 1e-3, num_samples)
    out *= level * 32767 / max(1e-9, np.max(np.abs(out)))
    return np.rint(out).astype(np.int16)
