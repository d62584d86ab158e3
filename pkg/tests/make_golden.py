"""Regenerate tests/golden/*.json from the straight-line reference oracles.

Usage: python3 tests/make_golden.py
"""

import json
from pathlib import Path

import numpy as np

import reference as ref
from hgcn.fixtures import fixture_dataset
from hgcn.model import ModelConfig, init_params

GOLDEN = Path(__file__).parent / "golden"

ROUTING_VOTES = [[[1.0, 0.0], [0.0, 1.0]],
                 [[1.0, 0.0], [0.0, -1.0]]]


def routing_trace():
    return {"votes": ROUTING_VOTES, "R": 3, "iterations": ref.routing(ROUTING_VOTES, 3)}


def forward_fixture():
    ds = fixture_dataset()
    g = ds.graphs[0]
    cfg = ModelConfig.for_dataset(ds.feature_dim, ds.num_classes)
    arrays = init_params(cfg, seed=0).snapshot()
    caps, primary = ref.forward(g.features, g.adjacency, arrays, cfg.K, cfg.capsule_counts,
                                R=cfg.R)
    Z = ref.masked_embed(primary, caps, g.label, arrays["recon.W"], arrays["recon.b"])
    m = ref.margin(caps, g.label)
    r = ref.reconstruction(g.adjacency, Z)
    return {"graph": "triangle_with_tail", "seed": 0, "class_capsules": caps.tolist(),
            "primary": primary.tolist(), "margin": m, "reconstruction": r,
            "total": m + 0.1 * r}


def main():
    GOLDEN.mkdir(exist_ok=True)
    for name, payload in [("routing_trace", routing_trace()), ("forward_4node", forward_fixture())]:
        (GOLDEN / f"{name}.json").write_text(json.dumps(payload, indent=1) + "\n")
        print("wrote", GOLDEN / f"{name}.json")


if __name__ == "__main__":
    main()
