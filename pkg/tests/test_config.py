import pytest
from hypothesis import given, strategies as st

from hclinpaint.config import ConfigError, RunConfig


def test_default_round_trip_is_fixed_point():
    text = RunConfig().to_text()
    again = RunConfig.from_text(text)
    assert again == RunConfig()
    assert again.to_text() == text


@given(
    st.floats(1e-3, 10, allow_nan=False),
    st.floats(0.5, 0.85),
    st.integers(1, 8),
    st.booleans(),
    st.tuples(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8)).map(lambda t: tuple(2 * x for x in t)),
)
def test_round_trip_arbitrary(tau, lo, batch, shift, widths):
    cfg = RunConfig()
    cfg.detector.tau_loss = tau
    cfg.detector.theta_lo = lo
    cfg.train.batch_size = batch
    cfg.model.shift_windows = shift
    cfg.model.widths = widths
    back = RunConfig.from_text(cfg.to_text())
    assert back == cfg
    assert back.to_text() == cfg.to_text()


def test_comments_and_blank_lines():
    cfg = RunConfig.from_text("# tuned\n\ntrain.steps = 10  # short\n")
    assert cfg.train.steps == 10


@pytest.mark.parametrize(
    "text",
    [
        "train.nonsense = 1",
        "bogus.steps = 1",
        "steps = 1",
        "train.steps 4",
        "train.steps = four",
        "model.shift_windows = maybe",
        "train.lambda_perc = 0.5",
        "detector.theta_lo = 0.95",
        "train.batch_size = 0",
    ],
)
def test_rejects(text):
    with pytest.raises(ConfigError):
        RunConfig.from_text(text)
