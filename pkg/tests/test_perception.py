import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import cv2
import numpy as np
import pytest
import torch
from scipy import ndimage

from hdrcycle.perception import (PROMPT, HeuristicParams, HeuristicProvider, PerceptionCache, RemoteProvider,
                                 artifact_response, gating_map, heuristic_artifact_mask, heuristic_exposure_masks,
                                 refresh_cache, soft_fractions)

LUMA = np.array([0.2126, 0.7152, 0.0722])


def const(v, h=32, w=32):
    return np.full((h, w, 3), v, np.float64)


def test_exposure_fractions():
    over, under = heuristic_exposure_masks(const(0.0))
    assert under.mean() == 1.0 and over.mean() == 0.0
    over, under = heuristic_exposure_masks(const(1.0))
    assert over.mean() == 1.0 and under.mean() == 0.0
    over, under = heuristic_exposure_masks(const(0.5))
    assert over.sum() == 0 and under.sum() == 0


def test_exposure_threshold_is_inclusive_on_luminance(rng):
    img = rng.random((24, 24, 3))
    lum = img @ LUMA
    over, under = heuristic_exposure_masks(img, t_over=0.7, t_under=0.3)
    assert np.array_equal(over.astype(bool), lum >= 0.7)
    assert np.array_equal(under.astype(bool), lum <= 0.3)


def test_threshold_order_validated():
    with pytest.raises(ValueError):
        heuristic_exposure_masks(const(0.5), t_over=0.05, t_under=0.95)


def test_hard_masks_are_binarised_soft_masks(rng):
    img = rng.random((24, 24, 3))
    over_h, under_h = heuristic_exposure_masks(img, 0.8, 0.2)
    over_s, under_s = heuristic_exposure_masks(img, 0.8, 0.2, soft=True)
    assert np.array_equal(over_h, (over_s >= 0.5).astype(np.float32))
    assert np.array_equal(under_h, (under_s >= 0.5).astype(np.float32))


def test_artifact_constant_and_ramp_are_clean():
    assert heuristic_artifact_mask(const(0.3)).sum() == 0
    ramp = np.repeat(np.linspace(0, 1, 32)[None, :, None], 32, 0).repeat(3, 2)
    # Laplacian of an affine image vanishes away from the border
    assert heuristic_artifact_mask(ramp)[6:-6, 6:-6].sum() == 0


def test_artifact_response_matches_scipy_oracle(rng):
    img = rng.random((20, 28, 3))
    lum = img @ LUMA
    blurred = ndimage.gaussian_filter(lum, 1.5, mode="mirror", truncate=3.0)
    oracle = np.abs(ndimage.laplace(blurred - lum, mode="mirror"))
    ours = artifact_response(torch.from_numpy(img.transpose(2, 0, 1).copy())[None], 1.5)[0, 0].numpy()
    assert np.allclose(ours, oracle, atol=1e-12)


def test_salt_pixel_flagged():
    img = const(0.2)
    img[16, 16] = 1.0
    m = heuristic_artifact_mask(img)
    assert m[16, 16] == 1.0
    assert m[:10].sum() == 0 and m[:, :10].sum() == 0


def test_blur_sigma_validated():
    with pytest.raises(ValueError):
        heuristic_artifact_mask(const(0.3), blur_sigma=0)


def test_heuristic_reports():
    p = HeuristicProvider()
    rep = p.query(const(0.5), "hdr_output")
    assert rep.has_artifacts is False and rep.counts == (0, 0, 0, 1024)
    img = const(0.0)
    img[:8] = 1.0
    img[20, 20] = 0.6
    a, b = p.query(img, "hdr_output"), p.query(img, "hdr_output")
    assert a.counts == b.counts and all(np.array_equal(x, y) for x, y in zip(a.saliency, b.saliency))
    assert a.counts[1] == 8 * 32 and a.counts[2] > 0
    assert a.counts[:3] == tuple(int(m.sum()) for m in a.saliency)
    ldr = p.query(img, "ldr_output")
    assert ldr.counts[1] == ldr.counts[2] == 0
    with pytest.raises(ValueError):
        p.query(img, "mystery")


def test_soft_fractions_shape_and_range(rng):
    img = torch.from_numpy(rng.random((3, 3, 16, 16)))
    f = soft_fractions(img)
    assert f.shape == (3, 3) and (f >= 0).all() and (f <= 1).all()


def test_gating_map():
    assert np.all(gating_map(np.zeros((4, 4)), 0.5) == 1.0)
    m = np.zeros((4, 4))
    m[0, 0] = 1
    g = gating_map(m, 0.5)
    assert g[0, 0] == 1.0 and g[1, 1] == 0.5


def test_cache_defaults_and_refresh():
    cache = PerceptionCache()
    sal = cache.saliency_for(["ldr/a", "ldr/b"], 32, 32)
    assert all(torch.equal(t, torch.ones(2, 1, 32, 32)) for t in (sal.artifact, sal.over, sal.under))
    assert torch.equal(cache.loss_gates(["ldr/a"]), torch.zeros(1, 3))

    img = const(0.0)
    img[:8] = 1.0
    outputs = {"ldr/a": (img, "hdr_output"), "hdr/b": (img, "ldr_output")}
    refresh_cache(cache, outputs, HeuristicProvider(), epoch=3)
    assert cache.epoch == 3
    # the hard black/white edge also trips the artifact detector
    assert cache.get("ldr/a").has_artifacts and cache.get("hdr/b").has_artifacts
    assert torch.equal(cache.loss_gates(["ldr/a", "hdr/b"]), torch.tensor([[1.0, 1.0, 1.0], [1.0, 0.0, 0.0]]))
    assert torch.equal(cache.loss_gates(["ldr/unknown"]), torch.zeros(1, 3))
    sal = cache.saliency_for(["ldr/a"], 32, 32)
    assert sal.over[0, 0, 0, 0] == 1.0 and sal.over[0, 0, 20, 0] == 0.5

    again = PerceptionCache()
    refresh_cache(again, outputs, HeuristicProvider(), epoch=3)
    s1, s2 = cache.to_state(), again.to_state()
    assert s1["reports"].keys() == s2["reports"].keys()
    back = PerceptionCache.from_state(s1)
    assert back.epoch == 3 and back.get("ldr/a").counts == cache.get("ldr/a").counts


# -- remote provider against a local stub server ---------------------------

class _Handler(BaseHTTPRequestHandler):
    reply: dict = {}
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((body, self.headers.get("Authorization")))
        data = json.dumps(type(self).reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    _Handler.seen = []
    yield f"http://127.0.0.1:{srv.server_address[1]}/"
    srv.shutdown()


def _png(mask):
    ok, buf = cv2.imencode(".png", (mask * 255).astype(np.uint8))
    return base64.b64encode(buf.tobytes()).decode()


def _noisy():
    img = const(0.4)
    img[5, 5] = 1.0
    img[25, 25] = 1.0
    return img


def test_remote_verdict_and_maps(server):
    keep = np.zeros((32, 32))
    keep[:16] = 1  # remote keeps only the top half of the heuristic artifact mask
    _Handler.reply = {"verdict": "yes", "saliency": {"artifact": _png(keep)}}
    rep = RemoteProvider(server, token="secret").query(_noisy(), "hdr_output")
    body, auth = _Handler.seen[0]
    assert auth == "Bearer secret"
    assert body["prompt"] == PROMPT and body["role"] == "hdr_output"
    assert rep.provider_id == "remote" and rep.has_artifacts
    heur = HeuristicProvider().query(_noisy(), "hdr_output")
    assert np.array_equal(rep.saliency[0], heur.saliency[0] * keep)
    assert rep.saliency[0][25, 25] == 0 and rep.saliency[0][5, 5] == 1


def test_remote_no_verdict_clears_artifacts(server):
    _Handler.reply = {"verdict": "No"}
    rep = RemoteProvider(server).query(_noisy(), "hdr_output")
    assert not rep.has_artifacts and rep.counts[0] == 0


def test_remote_malformed_reply_falls_back(server, caplog):
    _Handler.reply = {"answer": "maybe"}
    rep = RemoteProvider(server).query(_noisy(), "hdr_output")
    assert rep.provider_id == "heuristic"
    assert rep.counts == HeuristicProvider().query(_noisy(), "hdr_output").counts
    assert "falling back" in caplog.text or "using heuristic" in caplog.text


def test_remote_unreachable_falls_back(monkeypatch):
    monkeypatch.delenv("HDRCYCLE_PERCEPTION_URL", raising=False)
    rep = RemoteProvider(url="http://127.0.0.1:9/", timeout=0.5).query(_noisy(), "ldr_output")
    assert rep.provider_id == "heuristic"
    assert rep.counts[1] == rep.counts[2] == 0


def test_remote_reads_environment(monkeypatch):
    monkeypatch.setenv("HDRCYCLE_PERCEPTION_URL", "http://example.invalid/x")
    monkeypatch.setenv("HDRCYCLE_PERCEPTION_TOKEN", "tok")
    p = RemoteProvider()
    assert p.url == "http://example.invalid/x" and p.token == "tok"


def test_params_validation():
    with pytest.raises(ValueError):
        HeuristicParams(temperature=0)
