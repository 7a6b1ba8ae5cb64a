"""Golden-fixture replay against a running mock server.

Sends every request fixture and verifies the response byte-for-byte (or the
expected HTTP error code). The fixtures are shared with the client-side test
suite; passing both ways demonstrates protocol conformance.
"""

from __future__ import annotations

import json
import pathlib
import urllib.error
import urllib.request


def default_fixture_dir() -> pathlib.Path:
    """Repo-layout fixture location (tests/fixtures/protocol two levels up)."""
    here = pathlib.Path(__file__).resolve()
    for parent in here.parents:
        cand = parent / "tests" / "fixtures" / "protocol"
        if (cand / "fixtures.json").exists():
            return cand
    raise FileNotFoundError("could not locate tests/fixtures/protocol")


def _post(endpoint: str, blob: bytes, timeout: float):
    req = urllib.request.Request(
        endpoint.rstrip("/") + "/v1/denoise", data=blob, method="POST",
        headers={"Content-Type": "application/octet-stream"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        return exc.code, exc.read()


def run_selftest(endpoint: str, fixture_dir=None, timeout: float = 60.0,
                 printer=print) -> int:
    """Returns the number of failed fixtures (0 == conformant)."""
    fixture_dir = pathlib.Path(fixture_dir or default_fixture_dir())
    with open(fixture_dir / "fixtures.json", encoding="utf-8") as f:
        manifest = json.load(f)
    failures = 0
    for entry in manifest:
        blob = (fixture_dir / entry["request"]).read_bytes()
        status, body = _post(endpoint, blob, timeout)
        if entry["kind"] == "ok":
            expect = (fixture_dir / entry["response"]).read_bytes()
            ok = status == 200 and body == expect
        else:
            ok = status == int(entry["kind"].split("_")[1])
        failures += 0 if ok else 1
        printer(f"{entry['name']:20s} {'ok' if ok else f'FAIL (HTTP {status})'}")
    return failures
