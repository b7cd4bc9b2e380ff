#!/usr/bin/env python3
"""Regenerates the built-in architecture files under data/archs/.

The layouts follow the common CIFAR-10 variants: VGG-16 with batch norm and a
single linear classifier, ResNet-18 with 1x1 projection shortcuts, and
ResNet-56 with 1x1 projection shortcuts on the two downsampling blocks.
"""
import json
import pathlib
import sys


class Builder:
    def __init__(self, name, resolution):
        self.name = name
        self.resolution = resolution
        self.layers = []
        self.edges = []
        self.groups = []

    def _add(self, layer, preds):
        self.layers.append(layer)
        for p in preds:
            self.edges.append([p, layer["id"]])
        return layer["id"]

    def conv(self, lid, cin, cout, k, s, p, preds, bias=False):
        return self._add({"id": lid, "kind": "conv", "in_channels": cin,
                          "out_channels": cout, "kernel": [k, k],
                          "stride": [s, s], "padding": [p, p],
                          "bias": bias}, preds)

    def bn(self, lid, c, pred):
        return self._add({"id": lid, "kind": "bn", "in_channels": c,
                          "out_channels": c}, [pred])

    def pool(self, lid, c, k, s, pred):
        return self._add({"id": lid, "kind": "pool", "in_channels": c,
                          "out_channels": c, "kernel": [k, k],
                          "stride": [s, s], "padding": [0, 0]}, [pred])

    def add(self, lid, c, preds):
        return self._add({"id": lid, "kind": "add", "in_channels": c,
                          "out_channels": c}, preds)

    def fc(self, lid, fin, fout, pred):
        return self._add({"id": lid, "kind": "fc", "in_channels": fin,
                          "out_channels": fout, "bias": True}, [pred])

    def doc(self):
        return {"name": self.name, "input_resolution": self.resolution,
                "layers": self.layers, "edges": self.edges,
                "residual_groups": self.groups}


def vgg16():
    b = Builder("vgg16-cifar", [32, 32])
    cfg = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
           512, 512, 512, "M", 512, 512, 512, "M"]
    prev, cin, conv_i, pool_i = None, 3, 0, 0
    for item in cfg:
        if item == "M":
            pool_i += 1
            prev = b.pool(f"pool{pool_i}", cin, 2, 2, prev)
            continue
        conv_i += 1
        c = b.conv(f"conv{conv_i}", cin, item, 3, 1, 1, [prev] if prev else [])
        prev = b.bn(f"bn{conv_i}", item, c)
        cin = item
    b.fc("fc", 512, 10, prev)
    return b.doc()


def resnet(name, stages, blocks_per_stage, stem_width, final_pool):
    b = Builder(name, [32, 32])
    c = b.conv("conv1", 3, stem_width, 3, 1, 1, [])
    prev = b.bn("bn1", stem_width, c)
    cin = stem_width
    group = ["conv1"]
    for si, (width, first_stride) in enumerate(stages, start=1):
        for bi in range(1, blocks_per_stage + 1):
            tag = f"s{si}b{bi}"
            stride = first_stride if bi == 1 else 1
            ca = b.conv(f"{tag}_conv1", cin, width, 3, stride, 1, [prev])
            ba = b.bn(f"{tag}_bn1", width, ca)
            cb = b.conv(f"{tag}_conv2", width, width, 3, 1, 1, [ba])
            bb = b.bn(f"{tag}_bn2", width, cb)
            if stride != 1 or cin != width:
                if len(group) > 0:
                    b.groups.append(group)
                sc = b.conv(f"{tag}_sc_conv", cin, width, 1, stride, 0, [prev])
                sb = b.bn(f"{tag}_sc_bn", width, sc)
                group = [f"{tag}_sc_conv"]
                skip = sb
            else:
                skip = prev
            group.append(f"{tag}_conv2")
            prev = b.add(f"{tag}_add", width, [bb, skip])
            cin = width
    b.groups.append(group)
    prev = b.pool("avgpool", cin, final_pool, final_pool, prev)
    b.fc("fc", cin, 10, prev)
    return b.doc()


def toy4():
    b = Builder("toy4", [8, 8])
    c0 = b.conv("conv0", 3, 16, 3, 1, 1, [])
    b0 = b.bn("bn0", 16, c0)
    c1 = b.conv("conv1", 16, 16, 3, 1, 1, [b0])
    b1 = b.bn("bn1", 16, c1)
    c2 = b.conv("conv2", 16, 16, 3, 1, 1, [b1])
    b2 = b.bn("bn2", 16, c2)
    a = b.add("add", 16, [b2, b0])
    p = b.pool("pool1", 16, 2, 2, a)
    c3 = b.conv("conv3", 16, 32, 3, 1, 1, [p])
    b3 = b.bn("bn3", 32, c3)
    p2 = b.pool("pool2", 32, 4, 4, b3)
    b.fc("fc", 32, 10, p2)
    b.groups.append(["conv0", "conv2"])
    return b.doc()


def main():
    out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else
                       pathlib.Path(__file__).resolve().parent.parent / "data" / "archs")
    out.mkdir(parents=True, exist_ok=True)
    docs = [vgg16(),
            resnet("resnet18-cifar", [(64, 1), (128, 2), (256, 2), (512, 2)], 2, 64, 4),
            resnet("resnet56-cifar", [(16, 1), (32, 2), (64, 2)], 9, 16, 8),
            toy4()]
    for d in docs:
        (out / f"{d['name']}.json").write_text(json.dumps(d, indent=1) + "\n")


if __name__ == "__main__":
    main()
