import time

import numpy as np
import pytest

from gem import relranker
from gem.errors import CredentialError, ScoringParseError, TransportError
from gem.relranker import PredictorConfig
from gem.stub_server import StubScoringServer

NAMES = ["background", "square_size", "square_shade",
         "bar_height", "bar_shift", "dot_radius"]
PNG = relranker.image_to_png(np.zeros((16, 16)))


def remote_cfg(endpoint, retries=2, timeout=5.0):
    return PredictorConfig(kind="remote", endpoint=endpoint, model="stub-model",
                           max_retries=retries, timeout=timeout)


def test_remote_score_parses_plain_reply():
    with StubScoringServer(scripts={0: ["[3, 0, 5, 1, 2, 4]"]}) as stub:
        record = relranker.remote_score(remote_cfg(stub.endpoint), 0, PNG, NAMES)
    assert record.scores == (3, 0, 5, 1, 2, 4)
    assert record.sample_id == 0


def test_remote_score_parses_prose_reply():
    reply = "Happy to help! My scores: [1,1,1,1,1,1] — based on the shapes."
    with StubScoringServer(scripts={4: [reply]}) as stub:
        record = relranker.remote_score(remote_cfg(stub.endpoint), 4, PNG, NAMES)
    assert record.scores == (1, 1, 1, 1, 1, 1)


def test_remote_score_retries_through_server_errors():
    with StubScoringServer(scripts={7: [500, 503, "[2, 2, 2, 2, 2, 2]"]}) as stub:
        record = relranker.remote_score(
            remote_cfg(stub.endpoint, retries=3, timeout=2.0), 7, PNG, NAMES,
            sleeper=lambda s: None)
        assert record.scores == (2, 2, 2, 2, 2, 2)
        assert stub.requests_seen == 3


def test_remote_score_malformed_replies_raise_typed_error():
    malformed = ["cannot comply", "[1, 2, 3]", "[9, 9, 9, 9, 9, 9]"]
    for k, reply in enumerate(malformed):
        with StubScoringServer(scripts={k: [reply]}) as stub:
            with pytest.raises(ScoringParseError) as err:
                relranker.remote_score(
                    remote_cfg(stub.endpoint, retries=1, timeout=2.0),
                    k, PNG, NAMES, sleeper=lambda s: None)
            assert reply in err.value.reply


def test_remote_score_persistent_500_is_transport_error():
    with StubScoringServer(scripts={1: [500, 500, 500, 500]}) as stub:
        with pytest.raises(TransportError):
            relranker.remote_score(remote_cfg(stub.endpoint, retries=2, timeout=2.0),
                                   1, PNG, NAMES, sleeper=lambda s: None)


def test_remote_score_auth_failure_is_credential_error():
    with StubScoringServer(scripts={2: [401]}) as stub:
        with pytest.raises(CredentialError):
            relranker.remote_score(remote_cfg(stub.endpoint), 2, PNG, NAMES)


def test_remote_score_missing_api_key_env():
    cfg = PredictorConfig(kind="remote", endpoint="http://127.0.0.1:1/x",
                          model="m", api_key_env="GEM_TEST_KEY_UNSET")
    with pytest.raises(CredentialError):
        relranker.remote_score(cfg, 0, PNG, NAMES)


def test_remote_score_wall_time_bounded_by_budget():
    # replies stall longer than the per-request timeout; total time must stay
    # under timeout * (retries + 1) plus scheduling slack
    timeout, retries = 0.4, 2
    slow = ("delay", 5.0, "[0, 0, 0, 0, 0, 0]")
    with StubScoringServer(scripts={3: [slow, slow, slow, slow]}) as stub:
        start = time.monotonic()
        with pytest.raises(TransportError):
            relranker.remote_score(
                remote_cfg(stub.endpoint, retries=retries, timeout=timeout),
                3, PNG, NAMES)
        elapsed = time.monotonic() - start
    assert elapsed <= timeout * (retries + 1) + 0.5


def test_remote_score_deadline_never_blocks_indefinitely():
    # unreachable endpoint: connection errors burn attempts, bounded overall
    cfg = PredictorConfig(kind="remote", endpoint="http://127.0.0.1:9/none",
                          model="m", max_retries=1, timeout=0.3)
    start = time.monotonic()
    with pytest.raises(TransportError):
        relranker.remote_score(cfg, 0, PNG, NAMES, sleeper=lambda s: None)
    assert time.monotonic() - start <= 0.3 * 2 + 0.5


def test_image_to_png_upscales():
    png = relranker.image_to_png(np.zeros((16, 16)), scale=8)
    assert png[:8] == b"\x89PNG\r\n\x1a\n"
    # IHDR width field: bytes 16..20 big-endian
    width = int.from_bytes(png[16:20], "big")
    assert width == 128
