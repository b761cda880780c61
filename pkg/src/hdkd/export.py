"""Stage-3 activation maps: channel-averaged, min-max normalized, written as CSV and 8-bit PGM."""
from __future__ import annotations

import numpy as np

from . import tensor as T


def normalize_map(a: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map (zero range) becomes all zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if not hi > lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def activation_map(model, image: np.ndarray) -> np.ndarray:
    """Output of the last stage-3 block for one ``[C, H, W]`` image, averaged over channels."""
    was_training = model.training
    model.eval()
    with T.no_grad():
        f = model.stage3_output(T.Tensor(image[None]))
    model.train(was_training)
    return normalize_map(f.data[0].mean(axis=0))


def load_image(path: str, size: int | None = None) -> np.ndarray:
    """RGB image as ``[3, H, W]`` floats in [0, 1], optionally resized to ``size`` x ``size``."""
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0


def write_map_csv(amap: np.ndarray, path: str) -> None:
    np.savetxt(path, amap, delimiter=",", fmt="%.6f")


def read_map_csv(path: str) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))


def to_bytes(amap: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(amap) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(amap: np.ndarray, path: str) -> None:
    """Binary (P5) 8-bit grayscale."""
    px = to_bytes(amap)
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_pgm(path: str) -> np.ndarray:
    """Decode a binary PGM to floats in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(v) for v in fields[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos + 1)
    return data.reshape(h, w).astype(np.float64) / maxval
