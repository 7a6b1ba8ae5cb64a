import json
import pathlib

import numpy as np
import pytest
import requests

from dreamphys.errors import ProtocolError, ShapeMismatch
from dreamphys.mockserver import MockDenoiseServer
from dreamphys.protocol import (MAX_PAYLOAD, Condition, decode_request,
                                decode_response, encode_request,
                                encode_response)

FIXTURES = pathlib.Path(__file__).parent / "fixtures" / "protocol"


class TestFraming:
    def test_request_roundtrip(self, rng):
        video = rng.standard_normal((3, 5, 7, 3)).astype(np.float32)
        cond = Condition(kind="text", text="wobble")
        blob = encode_request(video, 321, 100.0, cond)
        v2, mu, cfg, c2 = decode_request(blob)
        np.testing.assert_array_equal(v2, video)
        assert mu == 321 and cfg == 100.0
        assert c2.kind == "text" and c2.text == "wobble"

    def test_request_with_image(self, rng):
        video = rng.random((2, 4, 4, 3)).astype(np.float32)
        img = rng.random((9, 6, 3)).astype(np.float32)
        blob = encode_request(video, 5, 1.0, Condition(kind="image", image=img))
        v2, _, _, c2 = decode_request(blob)
        np.testing.assert_array_equal(c2.image, img)

    def test_response_roundtrip(self, rng):
        noise = rng.standard_normal((2, 3, 3, 3)).astype(np.float32)
        out = decode_response(encode_response(noise))
        assert out.tobytes() == noise.tobytes()

    def test_response_shape_check(self, rng):
        noise = rng.standard_normal((2, 3, 3, 3)).astype(np.float32)
        with pytest.raises(ShapeMismatch):
            decode_response(encode_response(noise), expect_shape=(2, 4, 4, 3))

    def test_bad_magic(self):
        with pytest.raises(ProtocolError):
            decode_request(b"NOPE" + b"\x00" * 64)

    def test_truncated_payload(self, rng):
        blob = encode_request(np.zeros((1, 2, 2, 3), np.float32), 1, 1.0,
                              Condition())
        with pytest.raises(ProtocolError):
            decode_request(blob[:-4])

    def test_trailing_bytes(self, rng):
        blob = encode_request(np.zeros((1, 2, 2, 3), np.float32), 1, 1.0,
                              Condition())
        with pytest.raises(ProtocolError):
            decode_request(blob + b"\x00")

    def test_condition_validation(self):
        with pytest.raises(ProtocolError):
            Condition(kind="image")
        with pytest.raises(ProtocolError):
            Condition(kind="text")
        with pytest.raises(ProtocolError):
            Condition(kind="painting")

    def test_oversize_rejected(self):
        class Fake:
            pass
        # 256 MB cap: just over in f32 elements
        n = MAX_PAYLOAD // 4 + 100
        t = int(np.ceil(n / (64 * 64 * 3)))
        with pytest.raises(ProtocolError):
            encode_request(np.zeros((t, 64, 64, 3), np.float32), 1, 1.0,
                           Condition())


class TestGoldenFixtures:
    def manifest(self):
        with open(FIXTURES / "fixtures.json", encoding="utf-8") as f:
            return json.load(f)

    def test_fixtures_pass_against_mock(self):
        with MockDenoiseServer("echo") as srv:
            for entry in self.manifest():
                blob = (FIXTURES / entry["request"]).read_bytes()
                r = requests.post(srv.endpoint + "/v1/denoise", data=blob,
                                  timeout=30)
                if entry["kind"] == "ok":
                    assert r.status_code == 200, entry["name"]
                    expect = (FIXTURES / entry["response"]).read_bytes()
                    assert r.content == expect, entry["name"]
                else:
                    assert r.status_code == int(entry["kind"].split("_")[1]), \
                        entry["name"]

    def test_fixture_shapes_echoed(self):
        for entry in self.manifest():
            if entry["kind"] != "ok":
                continue
            resp = (FIXTURES / entry["response"]).read_bytes()
            noise = decode_response(resp)
            assert list(noise.shape) == entry["shape"]

    def test_generator_is_deterministic(self, tmp_path):
        import shutil
        import subprocess
        import sys
        script = pathlib.Path(__file__).parents[1] / "scripts" / "make_protocol_fixtures.py"
        before = {p.name: p.read_bytes() for p in FIXTURES.iterdir()}
        subprocess.run([sys.executable, str(script)], check=True,
                       capture_output=True)
        after = {p.name: p.read_bytes() for p in FIXTURES.iterdir()}
        assert before == after
