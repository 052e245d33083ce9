"""Regenerates the hand-written model files in models/."""
import json
import pathlib

OUT = pathlib.Path(__file__).resolve().parent.parent / "models"


def layer(layers, kind, **kw):
    d = {"id": len(layers), "kind": kind}
    d.update(kw)
    layers.append(d)
    return d["id"]


def yolov2(w, h):
    table = [
        (3, 32, 2), (3, 64, 2), (3, 128, 0), (1, 64, 0), (3, 128, 2),
        (3, 256, 0), (1, 128, 0), (3, 256, 2), (3, 512, 0), (1, 256, 0),
        (3, 512, 0), (1, 256, 0), (3, 512, 2), (3, 1024, 0), (1, 512, 0),
        (3, 1024, 0), (1, 512, 0), (3, 1024, 0), (3, 1024, 0), (3, 1024, 0),
        (3, 1024, 0),
    ]
    layers = []
    for k, out, pool in table:
        kw = {"k": k, "out_channels": out}
        if pool:
            kw["pool"] = pool
        layer(layers, "conv", **kw)
    layer(layers, "head", k=1, out_channels=125)
    return {"name": "yolov2_baseline", "input": {"w": w, "h": h, "c": 3}, "layers": layers}


def rc_yolov2_like():
    layers = []
    layer(layers, "conv", k=3, out_channels=32, pool=2)
    c = 32

    def block(n):
        for _ in range(n):
            src = len(layers) - 1
            layer(layers, "depthwise", k=3)
            layer(layers, "pointwise", out_channels=c)
            layer(layers, "add", residual_from=src)

    def transition(out):
        nonlocal c
        if out == c:
            block(1)
            return
        layer(layers, "depthwise", k=3)
        layer(layers, "pointwise", out_channels=out)
        c = out

    def maxpool():
        layer(layers, "maxpool", k=2, stride=2)

    block(1)
    maxpool()
    transition(64)
    block(1)
    maxpool()
    transition(64)
    block(2)
    maxpool()
    transition(128)
    block(2)
    maxpool()
    transition(256)
    block(13)
    layer(layers, "head", k=1, out_channels=125)
    return {"name": "rc_yolov2_like", "input": {"w": 1280, "h": 720, "c": 3}, "layers": layers}


def toy():
    layers = []
    for out in (96, 384, 256, 96, 416):
        layer(layers, "pointwise", out_channels=out)
    layer(layers, "head", k=1, out_channels=160)
    return {"name": "toy_rcnet", "input": {"w": 16, "h": 16, "c": 128}, "layers": layers}


def toy_gammas():
    # layer 1 is the weakest in the first group, layer 4 in the second
    rows = ["layer_id,channel,gamma"]
    spec = [(0, 96, 0.5, 0.001), (1, 384, 0.001, 0.0001), (2, 256, 0.6, 0.001),
            (3, 96, 0.7, 0.001), (4, 416, 0.002, 0.0001)]
    for lid, n, base, step in spec:
        for j in range(n):
            rows.append(f"{lid},{j},{base + step * j:.6f}")
    return "\n".join(rows) + "\n"


def dump(name, model):
    (OUT / name).write_text(json.dumps(model, indent=2) + "\n")


if __name__ == "__main__":
    OUT.mkdir(exist_ok=True)
    dump("yolov2_baseline.json", yolov2(1280, 720))
    m = yolov2(416, 416)
    m["name"] = "yolov2_baseline_416"
    dump("yolov2_baseline_416.json", m)
    dump("rc_yolov2_like.json", rc_yolov2_like())
    dump("toy_rcnet.json", toy())
    (OUT / "toy_rcnet_gammas.csv").write_text(toy_gammas())
