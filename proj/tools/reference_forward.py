#!/usr/bin/env python3
"""Independent numpy forward pass used to produce golden logits.

Reads a dtm checkpoint, runs the masked model on a token list and writes one
row of logits per position (repr precision) to the output file.

    python3 tools/reference_forward.py tests/data/golden_model.ckpt \
        tests/data/golden_logits.txt 3 17 0 42 5 5 29 11
"""

import struct
import sys

import numpy as np

KINDS = ["attn_query", "attn_key", "attn_value", "attn_dense", "mlp_up", "mlp_gate", "mlp_down"]
EPS = 1e-5


def load(path):
    raw = open(path, "rb").read()
    if raw[:8] != b"DTMCKPT\0":
        raise SystemExit("bad magic")
    version, _ = struct.unpack_from("<II", raw, 8)
    if version != 1:
        raise SystemExit("unsupported version %d" % version)
    vocab, d, heads, layers, dff, max_seq = struct.unpack_from("<6Q", raw, 16)
    pos = 64

    def take(rows, cols=None):
        nonlocal pos
        n = rows * (cols or 1)
        a = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).copy()
        pos += 8 * n
        return a.reshape(rows, cols) if cols else a

    shapes = {"attn_query": (d, d), "attn_key": (d, d), "attn_value": (d, d), "attn_dense": (d, d),
              "mlp_up": (d, dff), "mlp_gate": (d, dff), "mlp_down": (dff, d)}
    model = {"embedding": take(vocab, d), "layers": []}
    for _ in range(layers):
        layer = {"attn_norm": take(d)}
        for k in KINDS:
            if k == "mlp_up":
                layer["mlp_norm"] = take(d)
            layer[k] = take(*shapes[k])
        model["layers"].append(layer)
    model["final_norm"] = take(d)
    model["unembedding"] = take(d, vocab)
    for layer in model["layers"]:
        for k in KINDS:
            r, c = shapes[k]
            m = np.frombuffer(raw, dtype=np.uint8, count=r * c, offset=pos).reshape(r, c)
            pos += r * c
            layer[k] = layer[k] * (m != 0)
    if pos != len(raw):
        raise SystemExit("trailing bytes")
    cfg = dict(vocab=vocab, d=d, heads=heads, layers=layers, dff=dff, max_seq=max_seq)
    return cfg, model


def rmsnorm(x, g):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + EPS) * g


def rotate(x, heads, dh):
    T = x.shape[0]
    half = dh // 2
    theta = 10000.0 ** (-2.0 * np.arange(half) / dh)
    ang = np.arange(T)[:, None] * theta[None, :]
    c, s = np.cos(ang), np.sin(ang)
    x = x.reshape(T, heads, half, 2)
    a, b = x[..., 0], x[..., 1]
    out = np.stack([a * c[:, None, :] - b * s[:, None, :], a * s[:, None, :] + b * c[:, None, :]], axis=-1)
    return out.reshape(T, heads * dh)


def forward(cfg, model, tokens):
    T, heads = len(tokens), cfg["heads"]
    dh = cfg["d"] // heads
    x = model["embedding"][tokens]
    causal = np.triu(np.ones((T, T), dtype=bool), 1)
    for L in model["layers"]:
        u = rmsnorm(x, L["attn_norm"])
        q = rotate(u @ L["attn_query"], heads, dh)
        k = rotate(u @ L["attn_key"], heads, dh)
        v = u @ L["attn_value"]
        att = np.zeros_like(x)
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            s = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
            s[causal] = -np.inf
            p = np.exp(s - s.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            att[:, sl] = p @ v[:, sl]
        x = x + att @ L["attn_dense"]
        u = rmsnorm(x, L["mlp_norm"])
        g = u @ L["mlp_gate"]
        x = x + ((g / (1.0 + np.exp(-g))) * (u @ L["mlp_up"])) @ L["mlp_down"]
    return rmsnorm(x, model["final_norm"]) @ model["unembedding"]


def main(argv):
    if len(argv) < 4:
        raise SystemExit(__doc__)
    cfg, model = load(argv[1])
    tokens = [int(t) for t in argv[3:]]
    logits = forward(cfg, model, tokens)
    with open(argv[2], "w") as f:
        f.write(" ".join(str(t) for t in tokens) + "\n")
        for row in logits:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


if __name__ == "__main__":
    main(sys.argv)
