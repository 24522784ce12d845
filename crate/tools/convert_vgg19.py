#!/usr/bin/env python3
"""Convert torchvision VGG-19 weights to an STXW file for `solidtex`.

The descriptor expects RGB input scaled to [0, 255] with per-channel means
subtracted. Torchvision expects [0, 1] input normalized by its own mean and
std, so that normalization is folded into conv1_1 here.

    python3 tools/convert_vgg19.py vgg19.stxw              # pretrained download
    python3 tools/convert_vgg19.py vgg19.stxw --state-dict vgg19.pth
    python3 tools/convert_vgg19.py vgg19.stxw --random     # format testing only
"""

import argparse
import json
import struct

import numpy as np
import torch
import torchvision

CAFFE_MEANS = np.array([123.68, 116.779, 103.939])
TV_MEAN = np.array([0.485, 0.456, 0.406])
TV_STD = np.array([0.229, 0.224, 0.225])

# torchvision `features` indices of the convolutions up to conv5_1
LAYERS = [
    ("conv1_1", 0), ("conv1_2", 2),
    ("conv2_1", 5), ("conv2_2", 7),
    ("conv3_1", 10), ("conv3_2", 12), ("conv3_3", 14), ("conv3_4", 16),
    ("conv4_1", 19), ("conv4_2", 21), ("conv4_3", 23), ("conv4_4", 25),
    ("conv5_1", 28),
]


def fold_input_normalization(w, b):
    """Rewrite conv1_1 so it accepts 255*x - CAFFE_MEANS instead of (x - mean) / std."""
    w = w.astype(np.float64)
    b = b.astype(np.float64)
    scale = 1.0 / (255.0 * TV_STD)
    offset = (CAFFE_MEANS / 255.0 - TV_MEAN) / TV_STD
    w2 = w * scale[None, :, None, None]
    b2 = b + np.einsum("ocij,c->o", w, offset)
    return w2.astype(np.float32), b2.astype(np.float32)


def write_stxw(path, tensors):
    meta = json.dumps({"network": "vgg19", "channel_order": "RGB", "means": CAFFE_MEANS.tolist(), "scale": 255.0}).encode()
    out = bytearray(b"STXW")
    out += struct.pack("<II", 1, len(meta)) + meta
    out += struct.pack("<I", len(tensors))
    offset = 0
    for name, t in tensors:
        nb = name.encode()
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
        out += struct.pack("<Q", offset)
        offset += 4 * t.size
    for _, t in tensors:
        out += np.ascontiguousarray(t, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(out)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    src = ap.add_mutually_exclusive_group()
    src.add_argument("--state-dict", help="a saved torchvision vgg19 state dict")
    src.add_argument("--random", action="store_true", help="untrained weights, for testing the format")
    args = ap.parse_args()

    if args.random:
        model = torchvision.models.vgg19(weights=None)
    elif args.state_dict:
        model = torchvision.models.vgg19(weights=None)
        model.load_state_dict(torch.load(args.state_dict, map_location="cpu"))
    else:
        model = torchvision.models.vgg19(weights=torchvision.models.VGG19_Weights.IMAGENET1K_V1)

    feats = model.features
    tensors = []
    for name, idx in LAYERS:
        w = feats[idx].weight.detach().numpy()
        b = feats[idx].bias.detach().numpy()
        if name == "conv1_1":
            w, b = fold_input_normalization(w, b)
        tensors.append((f"{name}.weight", w))
        tensors.append((f"{name}.bias", b))
    write_stxw(args.out, tensors)
    print(f"wrote {args.out} ({len(tensors)} tensors)")


if __name__ == "__main__":
    main()
