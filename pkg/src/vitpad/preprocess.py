"""Face geometry: eye-level alignment, crop, normalization, flip augmentation.

A two-point similarity transform (rotation + uniform scale + translation)
maps the eye centers onto fixed horizontal positions in the output crop,
so eyes end up level regardless of the source pose. The two-point fit is
exact: both eye residuals are zero up to float rounding.
"""

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, GeometryError, VitPadIOError
from .tensor import Tensor

# Output-relative eye targets: left eye at (EYE_X*S, EYE_Y*S), right eye
# mirrored at ((1-EYE_X)*S, EYE_Y*S). Chosen for a face-filling crop.
EYE_X = 0.35
EYE_Y = 0.38
CROP_SIZE = 224


@dataclass(frozen=True)
class Landmarks:
    """Eye centers in source-image pixel coordinates; 'left' means image-left."""

    left_eye: tuple
    right_eye: tuple


@dataclass
class RawImage:
    """8-bit RGB image; pixels as [H, W, 3] uint8, row-major."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width, 3):
            raise FormatError(
                f"pixel buffer shape {self.pixels.shape} does not match "
                f"{self.height}x{self.width} RGB"
            )


def read_ppm(path) -> RawImage:
    """Binary PPM (P6), 8-bit, with whitespace/comment-tolerant header parsing."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise VitPadIOError(f"cannot read image {path}: {exc}") from exc

    if blob[:2] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (P6) file")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        token = blob[start:pos]
        if not token.isdigit():
            raise FormatError(f"{path}: malformed PPM header token {token!r}")
        fields.append(int(token))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    need = width * height * 3
    payload = blob[pos:pos + need]
    if len(payload) != need:
        raise FormatError(f"{path}: expected {need} pixel bytes, found {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return RawImage(width=width, height=height, pixels=pixels.copy())


def write_ppm(image, path) -> None:
    if isinstance(image, RawImage):
        pixels = image.pixels
    else:
        pixels = np.ascontiguousarray(image, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise FormatError(f"write_ppm: expected [H,W,3], got {pixels.shape}")
    h, w = pixels.shape[:2]
    try:
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(pixels.tobytes(order="C"))
    except OSError as exc:
        raise VitPadIOError(f"cannot write image {path}: {exc}") from exc


def fit_similarity(lm: Landmarks, out_size: int = CROP_SIZE, eye_x: float = EYE_X, eye_y: float = EYE_Y):
    """Similarity transform (as complex a, b with z -> a*z + b) mapping the
    source eye points exactly onto the crop's target eye positions."""
    s1 = complex(lm.left_eye[0], lm.left_eye[1])
    s2 = complex(lm.right_eye[0], lm.right_eye[1])
    if s1 == s2:
        raise GeometryError("eye landmarks coincide; similarity transform undefined")
    d1 = complex(eye_x * out_size, eye_y * out_size)
    d2 = complex((1.0 - eye_x) * out_size, eye_y * out_size)
    a = (d2 - d1) / (s2 - s1)
    b = d1 - a * s1
    return a, b


def align_crop(img: RawImage, lm: Landmarks, out_size: int = CROP_SIZE,
               eye_x: float = EYE_X, eye_y: float = EYE_Y) -> Tensor:
    """Warp the face so eye centers land on the target positions; returns
    [3, out, out] float32 in [0, 255]. Bilinear sampling, edge-clamped."""
    for point in (lm.left_eye, lm.right_eye):
        if not (0 <= point[0] < img.width and 0 <= point[1] < img.height):
            raise GeometryError(f"landmark {point} outside image {img.width}x{img.height}")
    a, b = fit_similarity(lm, out_size, eye_x, eye_y)
    inv_a = 1.0 / a

    xs_out, ys_out = np.meshgrid(np.arange(out_size, dtype=np.float64),
                                 np.arange(out_size, dtype=np.float64))
    zd = xs_out + 1j * ys_out
    zs = (zd - b) * inv_a
    xs, ys = zs.real, zs.imag

    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    xi0 = np.clip(x0, 0, img.width - 1)
    xi1 = np.clip(x0 + 1, 0, img.width - 1)
    yi0 = np.clip(y0, 0, img.height - 1)
    yi1 = np.clip(y0 + 1, 0, img.height - 1)

    src = img.pixels.astype(np.float64)
    out = np.empty((3, out_size, out_size), dtype=np.float32)
    for c in range(3):
        plane = src[:, :, c]
        top = (1.0 - fx) * plane[yi0, xi0] + fx * plane[yi0, xi1]
        bottom = (1.0 - fx) * plane[yi1, xi0] + fx * plane[yi1, xi1]
        out[c] = ((1.0 - fy) * top + fy * bottom).astype(np.float32)
    return Tensor(out)


def normalize(img: Tensor) -> Tensor:
    """Map 8-bit intensity range [0, 255] to [-1, 1]: v -> v/127.5 - 1."""
    return Tensor(img.data / 127.5 - 1.0)


def hflip(img: Tensor) -> Tensor:
    """Mirror a [C,H,W] tensor left-right; an exact involution."""
    if img.ndim != 3:
        raise GeometryError(f"hflip: expected [C,H,W], got shape {img.shape}")
    return Tensor(img.data[:, :, ::-1].copy())
