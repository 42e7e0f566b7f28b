"""Writes the independent reference fixtures used by the integration tests.

Everything here is computed with numpy and Pillow, without going through the
Rust code, so the tests compare two separate implementations.

    python3 generate_fixtures.py   # run from this directory
"""

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

HERE = Path(__file__).resolve().parent
MEAN = np.array([0.48145466, 0.4578275, 0.40821073])
STD = np.array([0.26862954, 0.26130258, 0.27577711])


def write_abst(path, array):
    array = np.ascontiguousarray(array)
    dtype = {np.dtype("float32"): 0, np.dtype("uint8"): 1}[array.dtype]
    header = b"ABST" + struct.pack("<BBB", 1, dtype, array.ndim)
    header += b"".join(struct.pack("<Q", n) for n in array.shape)
    path.write_bytes(header + array.astype(array.dtype.newbyteorder("<")).tobytes())


def cubic(x, a=-0.5):
    x = np.abs(x)
    return np.where(
        x <= 1,
        (a + 2) * x**3 - (a + 3) * x**2 + 1,
        np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0),
    )


def resize_matrix(n_in, n_out):
    """Dense [n_out, n_in] Catmull-Rom operator, half-pixel centers, edge clamp."""
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = (o + 0.5) * n_in / n_out - 0.5
        base = int(np.floor(src))
        for tap in range(base - 1, base + 3):
            m[o, min(max(tap, 0), n_in - 1)] += cubic(src - tap)
    return m


def fixture_image(width, height):
    """Smooth color field with one sharp edge, deterministic."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    r = 128 + 100 * np.sin(x / 9.0) * np.cos(y / 13.0)
    g = 40 + 170 * x / (width - 1)
    b = np.where(x + 0.6 * y > 45, 210.0, 35.0)
    return np.clip(np.round(np.stack([r, g, b], axis=-1)), 0, 255).astype(np.uint8)


def crop_fixture():
    width, height, size = 71, 53, 32
    image = fixture_image(width, height)
    Image.fromarray(image, "RGB").save(HERE / "crop_image.png")
    x0, y0, w, h = 17, 9, 26, 21
    crop = image[y0 : y0 + h, x0 : x0 + w].astype(np.float64)
    rows, cols = resize_matrix(h, size), resize_matrix(w, size)
    channels = [rows @ crop[:, :, c] @ cols.T for c in range(3)]
    tensor = np.stack([(ch / 255.0 - MEAN[c]) / STD[c] for c, ch in enumerate(channels)])
    write_abst(HERE / "crop_reference.abst", tensor.astype(np.float32))

    # Pillow's bicubic renormalizes the kernel at the borders instead of
    # clamping, so only interior pixels are comparable.
    pil = np.stack(
        [
            np.asarray(Image.fromarray(crop[:, :, c].astype(np.float32), "F").resize((size, size), Image.BICUBIC))
            for c in range(3)
        ]
    )
    pil = np.stack([(pil[c] / 255.0 - MEAN[c]) / STD[c] for c in range(3)])
    interior = (slice(None), slice(3, size - 3), slice(3, size - 3))
    pil_dev = float(np.abs(pil[interior] - tensor[interior]).max())
    write_abst(HERE / "crop_pillow.abst", pil.astype(np.float32))

    meta = {
        "image": "crop_image.png",
        "box": {"x0": x0, "y0": y0, "width": w, "height": h},
        "input_size": size,
        "mean": MEAN.tolist(),
        "std": STD.tolist(),
        "pillow_interior_margin": 3,
        "pillow_interior_max_abs_dev": pil_dev,
    }
    (HERE / "crop_reference.json").write_text(json.dumps(meta, indent=2) + "\n")


def attention_fixture():
    rng = np.random.default_rng(20240611)
    heads, side, k = 6, 14, 20
    logits = rng.normal(size=(heads, side * side + 1)) * 2.0
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    attn = probs[:, 1:].reshape(heads, side, side).astype(np.float32)
    # a tie between two cells to pin the row-major tie-break
    attn[:, 2, 5] = attn[:, 9, 1] = attn[:, :, :].max() * 1.5
    write_abst(HERE / "attention_6x14x14.abst", attn)
    mean = attn.astype(np.float64).mean(axis=0)
    flat = mean.reshape(-1)
    order = np.argsort(-flat, kind="stable")[:k]
    expected = {
        "heads": heads,
        "grid": side,
        "k": k,
        "head_mean": flat.tolist(),
        "top_k": [{"row": int(i // side), "col": int(i % side), "value": float(flat[i])} for i in order],
    }
    (HERE / "attention_expected.json").write_text(json.dumps(expected, indent=1) + "\n")


if __name__ == "__main__":
    crop_fixture()
    attention_fixture()
