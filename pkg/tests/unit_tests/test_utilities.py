import math

import numpy as np
import pytest

from autophoto._utilities import (
    ConfigError,
    NumericalError,
    SceneOverlapError,
    csv_preamble,
    derive_seed,
    dumps_canonical,
    require_finite,
    rng_for,
    wrap_angle,
)


def test_derived_seeds_are_stable_and_label_sensitive() -> None:
    assert derive_seed(3, "scene", 0) == derive_seed(3, "scene", 0)
    assert derive_seed(3, "scene", 0) != derive_seed(3, "scene", 1)
    assert derive_seed(3, "scene", 0) != derive_seed(4, "scene", 0)
    assert derive_seed(3, "a") != derive_seed(3, "b")
    assert 0 <= derive_seed(2**40, "x") < 2**31


def test_rng_streams_are_reproducible() -> None:
    a = rng_for(1, "reset", 7).random(5)
    b = rng_for(1, "reset", 7).random(5)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, rng_for(1, "reset", 8).random(5))


@pytest.mark.parametrize(
    "angle, expected",
    [
        (0.0, 0.0),
        (math.pi, -math.pi),
        (-math.pi, -math.pi),
        (3 * math.pi / 2, -math.pi / 2),
        (-7.0, -7.0 + 2 * math.pi),
    ],
)
def test_wrap_angle(angle: float, expected: float) -> None:
    assert wrap_angle(angle) == pytest.approx(expected, abs=1e-12)
    assert wrap_angle(np.array([angle]))[0] == pytest.approx(expected, abs=1e-12)


def test_wrap_angle_leaves_in_range_values_untouched() -> None:
    angles = np.random.default_rng(0).uniform(-math.pi, math.pi, 1000)
    assert wrap_angle(angles).tobytes() == angles.tobytes()
    assert all(wrap_angle(float(a)) == a for a in angles[:50])
    wrapped = wrap_angle(np.random.default_rng(1).uniform(-50.0, 50.0, 1000))
    assert np.all((wrapped >= -math.pi) & (wrapped < math.pi))


def test_require_finite() -> None:
    require_finite(np.ones(3), "ones")
    with pytest.raises(NumericalError, match="weights"):
        require_finite(np.array([1.0, np.inf]), "weights")


def test_canonical_json() -> None:
    assert dumps_canonical({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'
    with pytest.raises(ValueError):
        dumps_canonical({"x": float("nan")})


def test_csv_preamble() -> None:
    text = csv_preamble({"seed": 1}, eval={"scenes": 2})
    lines = text.splitlines()
    assert lines[0].startswith("# autophoto ")
    assert lines[1:] == ['# run_config {"seed":1}', '# eval {"scenes":2}']
    assert text.endswith("\n")


def test_overlap_is_a_config_error() -> None:
    assert issubclass(SceneOverlapError, ConfigError)
