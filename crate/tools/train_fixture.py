"""Train the LeNet-style fixture model and write it as an .ftc container.

The training images follow the same blob recipe as
`faultclip_core::dataset::make_synthetic_set` (numpy RNG, so the samples
differ but the distribution is the same). Run from the repository root:

    python3 tools/train_fixture.py fixtures/lenet-fixture.ftc
"""

import json
import struct
import sys
import zlib

import numpy as np
import torch
from torch import nn

SEED = 20240611
CLASSES = 10
SHAPE = (1, 28, 28)
# Stored as two's-complement fixed32 with 15 integer and 16 fraction bits.
INT_BITS, FRAC_BITS = 15, 16


def blobs(rng, n, shape=SHAPE, classes=CLASSES):
    c, h, w = shape
    m = min(h, w)
    radius, sigma, jitter = 0.3 * m, 0.1 * m, 0.08 * m
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    images = np.empty((n, c, h, w), dtype=np.float32)
    labels = np.arange(n) % classes
    for i, k in enumerate(labels):
        theta = 2 * np.pi * k / classes
        dy, dx = rng.uniform(-jitter, jitter, size=2)
        amp = rng.uniform(0.6, 1.0)
        cy = (h - 1) / 2 + radius * np.sin(theta) + dy
        cx = (w - 1) / 2 + radius * np.cos(theta) + dx
        bump = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sigma * sigma))
        for ch in range(c):
            gain = 1.0 if c == 1 else 0.55 + 0.45 * np.cos(theta + 2 * np.pi * ch / c)
            noise = rng.uniform(-0.15, 0.15, size=(h, w))
            images[i, ch] = np.clip(amp * gain * bump + noise, 0.0, 1.0)
    return images, labels


class LeNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 4, 5)
        self.conv2 = nn.Conv2d(4, 8, 5)
        self.fc1 = nn.Linear(128, 32)
        self.fc2 = nn.Linear(32, CLASSES)

    def forward(self, x):
        x = torch.max_pool2d(torch.relu(self.conv1(x)), 2)
        x = torch.max_pool2d(torch.relu(self.conv2(x)), 2)
        x = torch.relu(self.fc1(x.flatten(1)))
        return self.fc2(x)


LAYERS = [
    {"name": "conv1", "kind": "conv2d", "in_channels": 1, "out_channels": 4,
     "kernel": [5, 5], "stride": [1, 1], "padding": [0, 0]},
    {"name": "relu1", "kind": "relu"},
    {"name": "pool1", "kind": "maxpool2d", "pool": [2, 2], "stride": [2, 2]},
    {"name": "conv2", "kind": "conv2d", "in_channels": 4, "out_channels": 8,
     "kernel": [5, 5], "stride": [1, 1], "padding": [0, 0]},
    {"name": "relu2", "kind": "relu"},
    {"name": "pool2", "kind": "maxpool2d", "pool": [2, 2], "stride": [2, 2]},
    {"name": "flatten", "kind": "flatten"},
    {"name": "fc1", "kind": "fully_connected", "in_features": 128, "out_features": 32},
    {"name": "relu3", "kind": "relu"},
    {"name": "fc2", "kind": "fully_connected", "in_features": 32, "out_features": CLASSES},
    {"name": "output", "kind": "softmax_argmax"},
]


def train():
    rng = np.random.default_rng(SEED)
    torch.manual_seed(SEED)
    x, y = blobs(rng, 6000)
    xv, yv = blobs(rng, 1000)
    x, y = torch.from_numpy(x), torch.from_numpy(y)
    model = LeNet()
    opt = torch.optim.Adam(model.parameters(), lr=3e-3, weight_decay=1e-4)
    for epoch in range(12):
        perm = torch.randperm(len(x))
        for b in range(0, len(x), 64):
            idx = perm[b:b + 64]
            opt.zero_grad()
            loss = nn.functional.cross_entropy(model(x[idx]), y[idx])
            loss.backward()
            opt.step()
        with torch.no_grad():
            acc = (model(torch.from_numpy(xv)).argmax(1).numpy() == yv).mean()
        print(f"epoch {epoch}: loss {loss.item():.4f} held-out acc {acc:.4f}", file=sys.stderr)
    return model


def fixed32_words(t):
    """Truncate toward zero and saturate, as `encode_word` does."""
    scaled = np.trunc(t.astype(np.float64) * (1 << FRAC_BITS))
    raw = np.clip(scaled, -(2**31), 2**31 - 1).astype("<i4")
    return raw.view("<u4")


def write_ftc(model, path):
    tensors, payload = [], bytearray()
    params = dict(model.named_parameters())
    for i, layer in enumerate(LAYERS):
        if layer["kind"] not in ("conv2d", "fully_connected"):
            continue
        for role in ("weight", "bias"):
            t = fixed32_words(params[f"{layer['name']}.{role}"].detach().numpy())
            tensors.append({"name": f"{layer['name']}.{role}", "layer": i, "role": role,
                            "shape": list(t.shape), "words": int(t.size)})
            payload += t.tobytes()
    manifest = {
        "format_version": 1,
        "name": "lenet-fixture",
        "input_shape": list(SHAPE),
        "num_classes": CLASSES,
        "numeric_format": {"kind": "fixed32", "int_bits": INT_BITS, "frac_bits": FRAC_BITS},
        "metadata": {"train_seed": str(SEED), "trainer": "tools/train_fixture.py"},
        "layers": LAYERS,
        "tensors": tensors,
    }
    text = json.dumps(manifest, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(b"FTCLIP01")
        f.write(struct.pack("<I", len(text)))
        f.write(text)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


if __name__ == "__main__":
    torch.set_num_threads(1)
    write_ftc(train(), sys.argv[1] if len(sys.argv) > 1 else "fixtures/lenet-fixture.ftc")
