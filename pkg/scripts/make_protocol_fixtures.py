#!/usr/bin/env python3
"""Generate the golden wire-protocol fixtures under tests/fixtures/protocol.

Deterministic (seeded); rerunning reproduces the committed bytes. Each
request fixture has an expected outcome: an echo-response fixture, or an
HTTP status for the malformed ones. fixtures.json is the manifest.
"""

import json
import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from dreamphys.protocol import Condition, encode_request, encode_response

OUT = pathlib.Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "protocol"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20240612)
    manifest = []

    cases = [
        ("small_none", (2, 4, 4, 3), 120, 100.0, Condition()),
        ("text_cond", (3, 8, 8, 3), 640, 100.0,
         Condition(kind="text", text="a cantilever swaying")),
        ("image_cond", (2, 6, 6, 3), 75, 7.5,
         Condition(kind="image",
                   image=rng.random((6, 6, 3)).astype(np.float32))),
        ("modelscope_shape", (16, 64, 64, 3), 500, 100.0,
         Condition(kind="text", text="beam bending under gravity")),
    ]
    for name, shape, mu, cfg, cond in cases:
        video = rng.standard_normal(shape).astype(np.float32)
        req = encode_request(video, mu, cfg, cond)
        resp = encode_response(video)   # mock-echo answer
        (OUT / f"req_{name}.bin").write_bytes(req)
        (OUT / f"resp_{name}.bin").write_bytes(resp)
        manifest.append({"name": name, "kind": "ok", "shape": list(shape),
                         "request": f"req_{name}.bin",
                         "response": f"resp_{name}.bin"})

    good = encode_request(rng.standard_normal((2, 4, 4, 3)).astype(np.float32),
                          10, 100.0, Condition())
    (OUT / "req_bad_magic.bin").write_bytes(b"XXXX" + good[4:])
    manifest.append({"name": "bad_magic", "kind": "http_400",
                     "request": "req_bad_magic.bin"})
    (OUT / "req_truncated.bin").write_bytes(good[:-17])
    manifest.append({"name": "truncated", "kind": "http_400",
                     "request": "req_truncated.bin"})

    with open(OUT / "fixtures.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    print(f"wrote {len(manifest)} fixtures to {OUT}")


if __name__ == "__main__":
    main()
