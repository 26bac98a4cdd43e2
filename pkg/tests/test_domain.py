import json
import math
import random

import httpx
import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from egograph.domain import (
    DomainFilterConfig,
    DomainPathFilter,
    EncoderError,
    HashingEncoder,
    HttpEmbeddingClient,
    LookupEncoder,
    encode_checked,
    filter_paths,
    score_paths,
)
from egograph.knowledge_net import SemanticPath
from egograph.resources import default_reference_sentences
from oracles import sort_truncate


def path(text, score=None, i=0):
    return SemanticPath((f"/c/en/x{i}", "/r/IsA", f"/c/en/y{i}"), text=text, score=score)


class TestScorePaths:
    def test_identical_sentence_scores_one(self):
        cfg = DomainFilterConfig(["a knife cuts bread"], encoder=HashingEncoder())
        (p,) = score_paths([path("a knife cuts bread")], cfg)
        assert p.score == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_scores_zero(self):
        enc = LookupEncoder({"path": [1, 0, 0], "r1": [0, 1, 0], "r2": [0, 0, 1]})
        (p,) = score_paths([path("path")], DomainFilterConfig(["r1", "r2"], encoder=enc))
        assert p.score == pytest.approx(0.0, abs=1e-12)

    def test_mean_of_cosines(self):
        cosines = [0.2, 0.4, 0.9]
        e = np.eye(4)
        table = {"path": e[0]}
        for j, cos in enumerate(cosines, start=1):
            table[f"r{j}"] = cos * e[0] + math.sqrt(1 - cos**2) * e[j]
        cfg = DomainFilterConfig(["r1", "r2", "r3"], encoder=LookupEncoder(table))
        (p,) = score_paths([path("path")], cfg)
        assert p.score == pytest.approx(sum(cosines) / 3, abs=1e-12) == pytest.approx(0.5)

    def test_unrendered_paths_rejected(self):
        with pytest.raises(ValueError):
            score_paths([SemanticPath(("/c/en/a", "/r/IsA", "/c/en/b"))], DomainFilterConfig())

    def test_empty_reference_set_rejected(self):
        with pytest.raises(ValueError):
            DomainFilterConfig([])

    def test_encoder_failure_names_text(self):
        enc = LookupEncoder({"r": [1.0, 0.0], "known": [0.0, 1.0]})
        cfg = DomainFilterConfig(["r"], encoder=enc)
        with pytest.raises(EncoderError) as err:
            score_paths([path("known"), path("mystery text", i=1)], cfg)
        assert err.value.text == "mystery text"

    def test_encode_checked_isolates_culprit(self):
        class Picky:
            def encode(self, texts):
                if "bad" in texts:
                    raise RuntimeError("boom")
                return np.ones((len(texts), 2)) / math.sqrt(2)

        with pytest.raises(EncoderError) as err:
            encode_checked(Picky(), ["good", "bad"])
        assert err.value.text == "bad"


class TestFilterPaths:
    def test_fewer_than_cap_returns_all(self):
        scored = [path(f"t{i}", s, i) for i, s in enumerate([0.1, 0.5, 0.3, 0.9, 0.2])]
        assert filter_paths(scored) == ["t3", "t1", "t2", "t4", "t0"]

    def test_empty(self):
        assert filter_paths([]) == []

    def test_ties_broken_by_text(self):
        scored = [path("b", 0.5), path("a", 0.5), path("c", 0.7)]
        assert filter_paths(scored) == ["c", "a", "b"]

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_sort_oracle(self, seed):
        rng = random.Random(seed)
        items = [(rng.random(), f"text {rng.random():.12f}") for _ in range(40)]
        scored = [path(t, s, i) for i, (s, t) in enumerate(items)]
        got = filter_paths(scored, 30)
        assert len(got) == 30
        assert got == sort_truncate(items, 30)

    def test_unscored_rejected(self):
        with pytest.raises(ValueError):
            filter_paths([path("x")])


class TestEncoders:
    def test_hashing_unit_norm_and_deterministic(self):
        texts = ["knife", "a mug of tea", "", "!!"]
        a = HashingEncoder().encode(texts)
        b = HashingEncoder().encode(texts)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-6)
        assert a.shape == (4, 256)

    def test_hashing_shared_tokens_correlate(self):
        v = HashingEncoder().encode(["kettle boils water", "water in a kettle", "bicycle tyre"])
        assert v[0] @ v[1] > v[0] @ v[2]

    def test_lookup_unknown_text(self):
        with pytest.raises(EncoderError):
            LookupEncoder({}).encode(["x"])

    def test_http_client_roundtrip(self):
        seen = []

        def handler(request):
            texts = json.loads(request.content)["texts"]
            seen.append(texts)
            return httpx.Response(200, json={"vectors": [[len(t), 1.0] for t in texts]})

        client = HttpEmbeddingClient(
            "http://embed.test/v1", batch_size=2, client=httpx.Client(transport=httpx.MockTransport(handler))
        )
        out = client.encode(["a", "bb", "ccc"])
        assert seen == [["a", "bb"], ["ccc"]]
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0)

    def test_http_client_retries_server_errors(self):
        calls = []

        def handler(request):
            calls.append(1)
            if len(calls) < 3:
                return httpx.Response(503)
            return httpx.Response(200, json={"vectors": [[1.0, 0.0]]})

        client = HttpEmbeddingClient(
            "http://embed.test", backoff=0.0, client=httpx.Client(transport=httpx.MockTransport(handler))
        )
        client.encode(["x"])
        assert len(calls) == 3

    def test_http_client_gives_up(self):
        def handler(request):
            raise httpx.ConnectError("refused", request=request)

        client = HttpEmbeddingClient(
            "http://embed.test", retries=2, backoff=0.0, client=httpx.Client(transport=httpx.MockTransport(handler))
        )
        with pytest.raises(EncoderError, match="2 attempts"):
            client.encode(["x"])

    def test_http_client_no_retry_on_client_error(self):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(400)

        client = HttpEmbeddingClient(
            "http://embed.test", backoff=0.0, client=httpx.Client(transport=httpx.MockTransport(handler))
        )
        with pytest.raises(EncoderError):
            client.encode(["x"])
        assert len(calls) == 1

    def test_http_client_malformed_response(self):
        client = HttpEmbeddingClient(
            "http://embed.test",
            client=httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(200, json={"v": []}))),
        )
        with pytest.raises(EncoderError, match="malformed"):
            client.encode(["x"])


class TestDomainPathFilter:
    def test_defaults(self):
        f = DomainPathFilter().fit()
        assert f.reference_sentences_ == default_reference_sentences()
        assert f.reference_embeddings_.shape[0] == len(default_reference_sentences())

    def test_transform_matches_functional_api(self):
        paths = [path(t, i=i) for i, t in enumerate(["knife cuts bread", "sun is a star", "pan on the stove"])]
        f = DomainPathFilter(max_paths=2).fit()
        cfg = DomainFilterConfig(max_paths=2)
        assert f.transform(paths) == filter_paths(score_paths(paths, cfg), 2)

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            DomainPathFilter().transform([path("x")])

    def test_rejects_empty_references(self):
        with pytest.raises(ValueError):
            DomainPathFilter(reference_sentences=[]).fit()
