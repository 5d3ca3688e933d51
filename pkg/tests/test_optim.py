import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from elo_forge.errors import ShapeError
from elo_forge.optim import AdamWState, adamw_step, cosine_lr
from elo_forge.tensor import Tensor


def test_decay_only_path():
    p = {"w": Tensor(np.array([1.0]))}
    adamw_step(p, {"w": np.zeros(1)}, AdamWState(), lr=0.1, weight_decay=0.1)
    assert p["w"].data[0] == pytest.approx(0.99, abs=1e-15)


@given(st.lists(st.floats(-10, 10, allow_nan=False).filter(lambda g: abs(g) > 1e-3), min_size=1, max_size=6))
def test_first_step_is_sign_step(gs):
    g = np.array(gs)
    w0 = np.zeros_like(g)
    p = {"w": Tensor(w0.copy())}
    lr, eps = 0.01, 1e-8
    adamw_step(p, {"w": g}, AdamWState(), lr=lr, eps=eps, weight_decay=0.0)
    np.testing.assert_allclose(p["w"].data - w0, -lr * g / (np.abs(g) + eps), rtol=1e-12)


def test_state_counter_and_moments():
    st_ = AdamWState()
    p = {"a": Tensor(np.ones(3)), "b": Tensor(np.ones(2))}
    adamw_step(p, {"a": np.ones(3)}, st_)
    assert st_.t == 1 and set(st_.m) == {"a"}
    adamw_step(p, {"a": np.ones(3), "b": np.ones(2)}, st_)
    assert st_.t == 2 and set(st_.m) == {"a", "b"}
    assert st_.nbytes() == 2 * (3 + 2) * 8


def test_identical_runs_are_bitwise_equal():
    def run():
        rng = np.random.default_rng(9)
        p = {"w": Tensor(rng.standard_normal((4, 4)).astype(np.float32))}
        s = AdamWState()
        for _ in range(5):
            adamw_step(p, {"w": rng.standard_normal((4, 4)).astype(np.float32)}, s)
        return p["w"].data.tobytes()

    assert run() == run()


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        adamw_step({"w": Tensor(np.ones(3))}, {"w": np.ones(4)}, AdamWState())


def test_cosine_schedule_endpoints():
    assert cosine_lr(1.0, 0, 10) == 1.0
    assert cosine_lr(1.0, 10, 10) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
