import json

import numpy as np
import pytest

from mock_llm import MockLLM
from sparseq.explainer import (
    EmptyCompletionError, EncoderError, EndpointConfig, Explainer, FileBackend, HashingEncoder, NotCachedError,
    OracleError, OracleRequest, PersistentCache, RemoteBackend, SyntheticBackend, TransportError, build_prompt,
    cached_augment, remote_augment, synthetic_augment,
)
from sparseq.tagcore import write_feature_bin

GT = np.arange(20, dtype=np.float32).reshape(5, 4)


def test_prompt_template():
    p = build_prompt("Which category does this product belong to?", "categories", 50)
    assert "limit the answer length to 50 words" in p
    assert "If multiple options apply" in p
    assert p == build_prompt("Which category does this product belong to?", "categories", 50)
    q = build_prompt("What is the rating?", "numerical", 30)
    assert "numerical values" in q and "If multiple values apply" in q and "30 words" in q
    with pytest.raises(ValueError):
        build_prompt("", "categories", 50)
    with pytest.raises(ValueError):
        build_prompt("q?", "free", 50)


def test_request_budget_validated():
    with pytest.raises(ValueError):
        OracleRequest(0, word_budget=0)


def test_synthetic_exact_and_deterministic():
    r = synthetic_augment(OracleRequest(2), GT, 0.0, 0)
    assert np.array_equal(r.aug_embedding, GT[2])
    a = synthetic_augment(OracleRequest(3), GT, 0.5, 11)
    b = synthetic_augment(OracleRequest(3), GT, 0.5, 11)
    assert np.array_equal(a.aug_embedding, b.aug_embedding)
    with pytest.raises(OracleError):
        synthetic_augment(OracleRequest(5), GT, 0.0, 0)


def test_synthetic_noise_scale():
    gt = np.zeros((1000, 4), dtype=np.float32)
    rows = np.stack([synthetic_augment(OracleRequest(i), gt, 0.1, 3).aug_embedding for i in range(1000)])
    np.testing.assert_allclose(rows.std(axis=0), 0.1, atol=0.01)


def test_cached_augment():
    r = cached_augment(OracleRequest(1), GT)
    assert r.from_cache and np.array_equal(r.aug_embedding, GT[1])
    with pytest.raises(NotCachedError, match="augmentation not cached"):
        cached_augment(OracleRequest(9), GT)
    covered = np.array([True, False, True, True, True])
    with pytest.raises(NotCachedError):
        cached_augment(OracleRequest(1), GT, covered)


def test_file_backend_ledger(tmp_path):
    write_feature_bin(tmp_path / "aug_features.bin", GT)
    ex = Explainer(FileBackend(tmp_path / "aug_features.bin"))
    ex.query([4])
    ex.query([4])
    assert ex.ledger.new_calls == 0 and ex.ledger.cache_hits == 2 and ex.ledger.total_requests == 2


def test_explainer_persistent_cache_and_conservation(tmp_path):
    cache = PersistentCache(tmp_path / "aug_cache.jsonl", "ds")
    ex = Explainer(SyntheticBackend(GT, 0.2, seed=1), cache=cache, parallelism=3)
    first = ex.query([0, 1, 2])
    again = ex.query([1, 2, 3])
    assert ex.ledger.new_calls == 4 and ex.ledger.cache_hits == 2
    assert cache.appended == ex.ledger.new_calls
    assert np.array_equal(first[1].aug_embedding, again[1].aug_embedding) and again[1].from_cache
    lines = [json.loads(l) for l in (tmp_path / "aug_cache.jsonl").read_text().splitlines()]
    assert len(lines) == 4 and {"node_id", "prompt_hash", "raw_text", "embedding"} <= set(lines[0])
    # a fresh process sees the same entries
    ex2 = Explainer(SyntheticBackend(GT, 0.2, seed=1), cache=PersistentCache(tmp_path / "aug_cache.jsonl", "ds"))
    assert ex2.covers(range(4)) and not ex2.covers([4])
    ex2.query(range(4))
    assert ex2.ledger.new_calls == 0


def test_prompt_change_invalidates_cache(tmp_path):
    path = tmp_path / "c.jsonl"
    Explainer(SyntheticBackend(GT), cache=PersistentCache(path, "ds"), word_budget=50).query([0])
    ex = Explainer(SyntheticBackend(GT), cache=PersistentCache(path, "ds"), word_budget=20)
    ex.query([0])
    assert ex.ledger.new_calls == 1
    other = Explainer(SyntheticBackend(GT), cache=PersistentCache(path, "other"), word_budget=50)
    other.query([0])
    assert other.ledger.new_calls == 1


def test_hashing_encoder():
    enc = HashingEncoder(16)
    v = enc("camera lens camera")
    assert v.shape == (16,) and v.dtype == np.float32
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-6)
    assert np.array_equal(v, enc("Camera, lens; CAMERA"))
    with pytest.raises(EncoderError):
        enc("!!!")


def _endpoint(url, **kw):
    kw.setdefault("backoff_base", 0.01)
    kw.setdefault("backoff_cap", 0.02)
    return EndpointConfig(url=url, model="mock", encoder=HashingEncoder(8), **kw)


def test_remote_roundtrip_and_cache(tmp_path):
    texts = ["red camera", "blue lens", "green tripod"]
    with MockLLM(reply=lambda body: "answer " + body["messages"][0]["content"].split("\n")[0]) as srv:
        cache = PersistentCache(tmp_path / "aug_cache.jsonl", "ds")
        ex = Explainer(RemoteBackend(_endpoint(srv.url, api_key="k"), 8), texts, cache=cache)
        out = ex.query([0, 2])
        assert ex.ledger.new_calls == 2
        assert out[0].raw_text == "answer Text: red camera"
        req = srv.requests[0]
        assert req["path"] == "/v1/chat/completions" and req["auth"] == "Bearer k"
        assert req["body"]["model"] == "mock" and req["body"]["max_tokens"] == 128
        content = req["body"]["messages"][0]["content"]
        assert "limit the answer length to 50 words" in content
        again = ex.query([0])
        assert again[0].from_cache and len(srv.requests) == 2
        assert np.array_equal(again[0].aug_embedding, out[0].aug_embedding)


def test_remote_retries_then_succeeds():
    with MockLLM(fail_first=2, status=503) as srv:
        r = remote_augment(OracleRequest(0, "some text", "q?"), _endpoint(srv.url, max_retries=3))
        assert r.raw_text == "camera lens tripod" and len(srv.requests) == 3


def test_remote_gives_up_after_retries():
    with MockLLM(fail_first=10, status=429) as srv:
        with pytest.raises(TransportError, match="after 3 attempts"):
            remote_augment(OracleRequest(0, "t", "q?"), _endpoint(srv.url, max_retries=2))
        assert len(srv.requests) == 3


def test_remote_client_error_not_retried():
    with MockLLM(fail_first=10, status=400) as srv:
        with pytest.raises(TransportError, match="HTTP 400"):
            remote_augment(OracleRequest(0, "t", "q?"), _endpoint(srv.url))
        assert len(srv.requests) == 1


def test_remote_malformed_body_no_cache_write(tmp_path):
    with MockLLM(mode="malformed") as srv:
        cache = PersistentCache(tmp_path / "c.jsonl", "ds")
        ex = Explainer(RemoteBackend(_endpoint(srv.url), 8), ["x"], cache=cache)
        with pytest.raises(TransportError, match="malformed"):
            ex.query([0])
        assert cache.appended == 0 and not (tmp_path / "c.jsonl").exists()


def test_remote_empty_completion():
    with MockLLM(mode="empty") as srv:
        with pytest.raises(EmptyCompletionError):
            remote_augment(OracleRequest(0, "t", "q?"), _endpoint(srv.url))


def test_remote_connection_error_typed():
    with pytest.raises(TransportError):
        remote_augment(OracleRequest(0, "t", "q?"), _endpoint("http://127.0.0.1:9", max_retries=1, timeout=0.5))


def test_remote_requires_text_and_encoder():
    with pytest.raises(OracleError, match="no text"):
        remote_augment(OracleRequest(0, "", "q?"), _endpoint("http://x"))
    with pytest.raises(EncoderError):
        remote_augment(OracleRequest(0, "t", "q?"), EndpointConfig(url="http://x", model="m"))


def test_endpoint_from_env(monkeypatch):
    monkeypatch.setenv("SPARSEQ_ENDPOINT", "http://env:1")
    monkeypatch.setenv("SPARSEQ_API_KEY", "secret")
    cfg = EndpointConfig.from_env("m")
    assert cfg.url == "http://env:1" and cfg.api_key == "secret"
    monkeypatch.delenv("SPARSEQ_ENDPOINT")
    with pytest.raises(OracleError):
        EndpointConfig.from_env("m")


def test_parallel_results_merged_by_id():
    with MockLLM(reply=lambda body: body["messages"][0]["content"].split("\n")[0], latency=0.02) as srv:
        texts = [f"item{i} camera" for i in range(8)]
        ex = Explainer(RemoteBackend(_endpoint(srv.url), 8), texts, parallelism=4)
        out = ex.query(range(8))
        assert sorted(out) == list(range(8))
        assert all(out[i].raw_text == f"Text: item{i} camera" for i in range(8))
