"""Datasets and image I/O.

The shapes corpus draws 1-4 colored rectangles, circles and triangles on a
solid background. Scenes are parameterized in continuous [0, 1] coordinates
and keyed by (seed, index) through a counter-based RNG, so the same scene
renders consistently at any resolution and any platform.

IDX ingestion follows the classic big-endian format: magic bytes
(0, 0, dtype, ndim), then ndim uint32 dimensions, then row-major data.
"""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image

VAL_INDEX_OFFSET = 10_000_000

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class ShapesCorpus:
    """Procedurally generated scenes of flat-colored shapes."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def _scene(self, index: int):
        rng = np.random.Generator(np.random.Philox(key=[self.seed, index]))
        background = rng.uniform(0.0, 1.0, 3)
        shapes = []
        for _ in range(int(rng.integers(1, 5))):
            kind = int(rng.integers(0, 3))
            color = rng.uniform(0.05, 1.0, 3)
            if kind == 0:  # rectangle
                cx, cy = rng.uniform(0.15, 0.85, 2)
                w, h = rng.uniform(0.1, 0.45, 2)
                shapes.append(("rect", color, (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)))
            elif kind == 1:  # circle
                cx, cy = rng.uniform(0.15, 0.85, 2)
                r = rng.uniform(0.07, 0.28)
                shapes.append(("circle", color, (cx, cy, r)))
            else:  # triangle; resample until clearly non-degenerate
                while True:
                    v = rng.uniform(0.05, 0.95, (3, 2))
                    area = 0.5 * abs(
                        (v[1, 0] - v[0, 0]) * (v[2, 1] - v[0, 1])
                        - (v[2, 0] - v[0, 0]) * (v[1, 1] - v[0, 1])
                    )
                    if area > 0.02:
                        break
                shapes.append(("tri", color, v))
        return background, shapes

    def image(self, index: int, res: int) -> np.ndarray:
        """Render scene `index` at `res`; returns (3, res, res) in [-1, 1]."""
        background, shapes = self._scene(index)
        coords = (np.arange(res, dtype=np.float64) + 0.5) / res
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        canvas = np.empty((3, res, res), dtype=np.float64)
        canvas[:] = background[:, None, None]
        for kind, color, params in shapes:
            if kind == "rect":
                x0, y0, x1, y1 = params
                mask = (xx >= x0) & (xx <= x1) & (yy >= y0) & (yy <= y1)
            elif kind == "circle":
                cx, cy, r = params
                mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2
            else:
                v = params

                def edge(a, b):
                    return (v[b, 0] - v[a, 0]) * (yy - v[a, 1]) \
                        - (v[b, 1] - v[a, 1]) * (xx - v[a, 0])

                d1, d2, d3 = edge(0, 1), edge(1, 2), edge(2, 0)
                mask = ((d1 >= 0) & (d2 >= 0) & (d3 >= 0)) \
                    | ((d1 <= 0) & (d2 <= 0) & (d3 <= 0))
            canvas[:, mask] = color[:, None]
        return (canvas * 2.0 - 1.0).astype(np.float32)

    def batch(self, indices, res: int) -> torch.Tensor:
        return torch.from_numpy(np.stack([self.image(int(i), res) for i in indices]))

    def val_indices(self, count: int) -> list[int]:
        return list(range(VAL_INDEX_OFFSET, VAL_INDEX_OFFSET + count))


def read_idx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise ValueError(f"{path}: not an IDX file (bad magic)")
    dtype_code, ndim = data[2], data[3]
    if dtype_code not in _IDX_DTYPES:
        raise ValueError(f"{path}: unknown IDX dtype code 0x{dtype_code:02x}")
    dims = np.frombuffer(data, dtype=">u4", count=ndim, offset=4)
    offset = 4 + 4 * ndim
    dtype = _IDX_DTYPES[dtype_code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if offset + count * dtype.itemsize != len(data):
        raise ValueError(f"{path}: size mismatch for declared dims {dims.tolist()}")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return arr.reshape(tuple(int(d) for d in dims))


def write_idx(path, arr: np.ndarray) -> None:
    codes = {np.uint8: 0x08, np.int8: 0x09, np.int16: 0x0B,
             np.int32: 0x0C, np.float32: 0x0D, np.float64: 0x0E}
    code = codes.get(arr.dtype.type)
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype} for IDX")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, arr.ndim]))
        fh.write(np.asarray(arr.shape, dtype=">u4").tobytes())
        fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder(">")).tobytes())


def load_idx_bits(images_path, labels_path="", grid: int = 16, threshold: float = 0.5):
    """Read IDX images, binarize onto a (grid, grid) bit plane.

    Returns (bits, labels): bits as float32 {0, 1} of shape (N, grid, grid),
    labels as int64 or None.
    """
    imgs = read_idx(images_path)
    if imgs.ndim != 3:
        raise ValueError(f"{images_path}: expected (N, H, W) images, got shape {imgs.shape}")
    x = imgs.astype(np.float32)
    if np.issubdtype(imgs.dtype, np.integer):
        x = x / float(np.iinfo(imgs.dtype).max)
    x = np.clip(x, 0.0, 1.0)
    t = torch.from_numpy(x)[:, None]
    if t.shape[-2:] != (grid, grid):
        t = torch.nn.functional.interpolate(t, size=(grid, grid), mode="bilinear",
                                            align_corners=False, antialias=False)
    bits = (t[:, 0] >= threshold).to(torch.float32)
    labels = None
    if labels_path:
        lab = read_idx(labels_path)
        if lab.shape[0] != bits.shape[0]:
            raise ValueError("image and label counts differ")
        labels = torch.from_numpy(lab.astype(np.int64))
    return bits, labels


def load_image(path, res: int | None = None) -> torch.Tensor:
    """PNG (or other PIL-readable) file -> (3, h, w) float tensor in [-1, 1]."""
    img = Image.open(path).convert("RGB")
    if res is not None and img.size != (res, res):
        img = img.resize((res, res), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = np.clip(arr * 2.0 - 1.0, -1.0, 1.0)
    return torch.from_numpy(arr).permute(2, 0, 1)


def save_image(tensor, path) -> None:
    """(3, h, w) tensor in [-1, 1] -> 8-bit RGB PNG."""
    if torch.is_tensor(tensor):
        tensor = tensor.detach().cpu().numpy()
    arr = np.clip((tensor + 1.0) * 127.5, 0.0, 255.0).round().astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def image_grid(images, pad: int = 2, pad_value: float = -1.0) -> torch.Tensor:
    """Tile a list of equally sized (3, h, w) tensors into a near-square grid."""
    if not len(images):
        raise ValueError("no images to tile")
    images = [torch.as_tensor(im) for im in images]
    h, w = images[0].shape[-2:]
    cols = int(np.ceil(np.sqrt(len(images))))
    rows = int(np.ceil(len(images) / cols))
    grid = torch.full((3, rows * (h + pad) - pad, cols * (w + pad) - pad), pad_value)
    for i, im in enumerate(images):
        r, c = divmod(i, cols)
        grid[:, r * (h + pad):r * (h + pad) + h, c * (w + pad):c * (w + pad) + w] = im
    return grid


def bits_to_image(bits: torch.Tensor, upscale: int = 8) -> torch.Tensor:
    """Render a (k, c) bit grid as a black/white (3, k*up, c*up) image."""
    img = bits.detach().to(torch.float32) * 2.0 - 1.0
    img = img.repeat_interleave(upscale, -2).repeat_interleave(upscale, -1)
    return img[None].expand(3, -1, -1)
