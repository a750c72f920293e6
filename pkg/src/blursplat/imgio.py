"""Float image IO (PFM) and binary mask IO (PNG)."""

import numpy as np
from PIL import Image


def write_pfm(path, image):
    """Write a (H, W) or (H, W, 3) float image as a little-endian PFM file.

    Values are stored as float32. PFM rows run bottom to top.
    """
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 3:
        magic = b"PF"
    elif image.ndim == 2:
        magic = b"Pf"
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got {image.shape}")
    data = image.astype("<f4")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path):
    """Read a PFM file, returning a float32 array (H, W) or (H, W, 3)."""
    with open(path, "rb") as f:
        magic = f.readline().rstrip()
        if magic == b"PF":
            channels = 3
        elif magic == b"Pf":
            channels = 1
        else:
            raise ValueError(f"{path}: not a PFM file (magic {magic!r})")
        try:
            w, h = (int(t) for t in f.readline().split())
            scale = float(f.readline())
        except ValueError as exc:
            raise ValueError(f"{path}: malformed PFM header") from exc
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * channels
        raw = f.read(count * 4)
    if len(raw) != count * 4:
        raise ValueError(f"{path}: truncated PFM data "
                         f"(expected {count * 4} bytes, got {len(raw)})")
    data = np.frombuffer(raw, dtype=dtype).reshape(h, w, channels)[::-1]
    data = data.astype(np.float32)
    return data[..., 0] if channels == 1 else data


def write_mask_png(path, mask):
    """Write a boolean (H, W) mask as an 8-bit PNG (0 or 255)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected (H, W) mask, got {mask.shape}")
    Image.fromarray((mask.astype(np.uint8) * 255), mode="L").save(path)


def read_mask_png(path):
    """Read a PNG mask back to a boolean (H, W) array (threshold at 128)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr >= 128
