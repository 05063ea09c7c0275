"""Radix-2 2D Fourier transforms and amplitude-spectrum style injection.

Images are float arrays in ``[0, 1]`` laid out ``[..., H, W, C]``. Transforms
operate on planes laid out ``[..., H, W]`` and vectorise over leading axes.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Spectrum",
    "fft",
    "ifft",
    "fft2",
    "ifft2",
    "amplitude",
    "phase",
    "compose",
    "swap_window",
    "style_inject",
    "read_pnm",
    "write_pnm",
]

ROUNDTRIP_TOL = 1e-6


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unnormalised iterative radix-2 DIT transform along the last axis."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise ValueError(f"FFT length must be a power of two, got {n}")
    out = x[..., _bit_reverse(n)].copy()
    sign = 1.0 if inverse else -1.0
    half = 1
    while half < n:
        tw = np.exp(sign * 1j * np.pi * np.arange(half) / half)
        blocks = out.reshape(out.shape[:-1] + (n // (2 * half), 2, half))
        even = blocks[..., 0, :].copy()
        odd = blocks[..., 1, :] * tw
        blocks[..., 0, :] = even + odd
        blocks[..., 1, :] = even - odd
        out = blocks.reshape(out.shape)
        half *= 2
    return out


def ifft(x: np.ndarray) -> np.ndarray:
    return fft(x, inverse=True) / x.shape[-1]


def fft2(plane: np.ndarray) -> np.ndarray:
    """Forward 2D transform over the last two axes (no normalisation)."""
    plane = np.asarray(plane)
    if plane.ndim < 2:
        raise ValueError("fft2 needs at least 2 dimensions")
    rows = fft(plane)
    return np.swapaxes(fft(np.swapaxes(rows, -1, -2)), -1, -2)


def ifft2(spec: np.ndarray, real: bool = True) -> np.ndarray:
    """Inverse 2D transform with 1/(HW) normalisation.

    With ``real=True`` the imaginary residue is dropped after checking that it
    is below the round-trip tolerance.
    """
    spec = np.asarray(spec)
    if spec.ndim < 2:
        raise ValueError("ifft2 needs at least 2 dimensions")
    rows = ifft(spec)
    out = np.swapaxes(ifft(np.swapaxes(rows, -1, -2)), -1, -2)
    if not real:
        return out
    resid = np.abs(out.imag).max() if out.size else 0.0
    if resid >= ROUNDTRIP_TOL:
        raise ValueError(f"inverse transform is not real (max |imag| = {resid:.3g})")
    return out.real


def amplitude(spec: np.ndarray) -> np.ndarray:
    return np.sqrt(spec.real**2 + spec.imag**2)


def phase(spec: np.ndarray) -> np.ndarray:
    return np.arctan2(spec.imag, spec.real)


def compose(amp: np.ndarray, pha: np.ndarray) -> np.ndarray:
    return amp * np.cos(pha) + 1j * amp * np.sin(pha)


@dataclass(frozen=True)
class Spectrum:
    """Per-channel complex planes of an image, shape ``[..., C, H, W]``."""

    values: np.ndarray

    def __post_init__(self):
        h, w = self.values.shape[-2:]
        if not (_is_pow2(h) and _is_pow2(w)):
            raise ValueError(f"spectrum extents must be powers of two, got {h}x{w}")

    @classmethod
    def of_image(cls, image: np.ndarray) -> "Spectrum":
        return cls(fft2(np.moveaxis(np.asarray(image, dtype=np.float64), -1, -3)))

    @classmethod
    def from_polar(cls, amp: np.ndarray, pha: np.ndarray) -> "Spectrum":
        return cls(compose(amp, pha))

    @property
    def height(self) -> int:
        return self.values.shape[-2]

    @property
    def width(self) -> int:
        return self.values.shape[-1]

    @property
    def re(self) -> np.ndarray:
        return self.values.real

    @property
    def im(self) -> np.ndarray:
        return self.values.imag

    @property
    def amplitude(self) -> np.ndarray:
        return amplitude(self.values)

    @property
    def phase(self) -> np.ndarray:
        return phase(self.values)

    def to_image(self) -> np.ndarray:
        return np.moveaxis(ifft2(self.values), -3, -1)


def swap_window(height: int, width: int, beta: float) -> np.ndarray:
    """Boolean ``[H, W]`` mask of the low-frequency square in unshifted layout.

    Along each axis the signed frequency ``f`` of a bin (zero frequency at the
    centre after fftshift-style reindexing) is inside the window when
    ``|f| < floor(beta * n / 2)``. The window is symmetric so the spliced
    spectrum stays Hermitian; ``beta = 1`` selects every bin, including the
    Nyquist row/column.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")

    def axis_mask(n: int) -> np.ndarray:
        if beta == 1.0:
            return np.ones(n, dtype=bool)
        freq = np.fft.fftfreq(n, d=1.0 / n)
        return np.abs(freq) < np.floor(beta * n / 2)

    return np.outer(axis_mask(height), axis_mask(width))


def swapped_spectrum(content: np.ndarray, style: np.ndarray, beta: float = 1.0) -> Spectrum:
    """Content phase with style amplitude inside the swap window."""
    content = np.asarray(content)
    style = np.asarray(style)
    if content.shape != style.shape:
        raise ValueError(f"content {content.shape} and style {style.shape} differ")
    sc = Spectrum.of_image(content)
    ss = Spectrum.of_image(style)
    mask = swap_window(sc.height, sc.width, beta)
    amp = np.where(mask, ss.amplitude, sc.amplitude)
    return Spectrum.from_polar(amp, sc.phase)


def style_inject(content: np.ndarray, style: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """Restyle ``content`` with the amplitude spectrum of ``style``.

    Works on a single ``[H, W, C]`` image or a batch ``[B, H, W, C]`` paired by
    index. The result is clamped to ``[0, 1]`` and keeps the content dtype.
    """
    content = np.asarray(content)
    if content.ndim < 3:
        raise ValueError("images must be laid out [..., H, W, C]")
    spec = swapped_spectrum(content, style, beta)
    out = np.clip(spec.to_image(), 0.0, 1.0)
    return out.astype(content.dtype if content.dtype.kind == "f" else np.float64)


# ---------------------------------------------------------------------------
# PPM (P6) / PGM (P5) images, 8-bit
# ---------------------------------------------------------------------------


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        if buf[pos:pos + 1].isspace():
            pos += 1
        elif buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ValueError("truncated PNM header")
    return buf[start:pos], pos


def read_pnm(path: str | Path) -> np.ndarray:
    """Read a binary PPM/PGM into a float64 ``[H, W, C]`` array in ``[0, 1]``."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P6", b"P5"):
        raise ValueError(f"{path}: bad PNM magic {magic!r}")
    try:
        w_tok, pos = _read_token(buf, pos)
        h_tok, pos = _read_token(buf, pos)
        m_tok, pos = _read_token(buf, pos)
        w, h, maxval = int(w_tok), int(h_tok), int(m_tok)
    except ValueError as exc:
        raise ValueError(f"{path}: bad PNM header") from exc
    if w <= 0 or h <= 0 or maxval != 255:
        raise ValueError(f"{path}: unsupported PNM header ({w}x{h}, maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    pos += 1
    data = buf[pos:pos + w * h * channels]
    if len(data) != w * h * channels:
        raise ValueError(f"{path}: truncated pixel data")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(h, w, channels)
    return arr.astype(np.float64) / 255.0


def write_pnm(path: str | Path, image: np.ndarray) -> Path:
    """Write a ``[H, W, C]`` image (C = 1 or 3) as P5/P6 with linear 8-bit scaling."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ValueError(f"expected 1 or 3 channels, got {c}")
    if img.min() < 0 or img.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    raw = np.round(img * 255.0).astype(np.uint8)
    magic = b"P6" if c == 3 else b"P5"
    path = Path(path)
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + raw.tobytes())
    return path
