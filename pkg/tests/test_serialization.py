import struct

import numpy as np
import pytest

from prguide import Condition, FormatError, LatentGrid, MlpDenoiser, make_schedule
from prguide.models import load_model, model_from_bytes, model_to_bytes, save_model
from prguide.scenario import toy_scenario

SCHED = make_schedule(20)


@pytest.fixture(scope="module")
def gmm():
    return toy_scenario(shape=(2, 3, 2)).personalized


@pytest.fixture(scope="module", params=["epsilon", "v"])
def mlp(request):
    grids = [LatentGrid.from_flat(np.arange(12.0) * k / 12, 2, 3, 2) for k in range(4)]
    conds = [Condition.prompt(k % 2) for k in range(4)]
    return MlpDenoiser(
        hidden_layer_sizes=(8, 6), activation="tanh", prediction=request.param, n_steps=5, batch_size=4
    ).fit(grids, conds, schedule=SCHED)


def test_header(gmm):
    buf = model_to_bytes(gmm)
    assert buf[:4] == b"PRGM"
    assert struct.unpack_from("<II", buf, 4) == (1, 1)


def test_gmm_round_trip(gmm, tmp_path):
    save_model(gmm, tmp_path / "m.prgm")
    back = load_model(tmp_path / "m.prgm")
    assert np.array_equal(back.weights, gmm.weights)
    assert np.array_equal(back.variances, gmm.variances)
    assert back.labels.tolist() == gmm.labels.tolist()
    assert back.subjects.tolist() == gmm.subjects.tolist()
    assert all(a == b for a, b in zip(back.means, gmm.means))
    assert model_to_bytes(back) == model_to_bytes(gmm)


def test_mlp_round_trip(mlp, rng):
    buf = model_to_bytes(mlp)
    assert struct.unpack_from("<I", buf, 8) == (2,)
    back = model_from_bytes(buf)
    assert back.prediction == mlp.prediction
    assert np.array_equal(back.weights(), mlp.weights())
    x = LatentGrid(rng.standard_normal((2, 3, 2)))
    cond = Condition.prompt(1)
    assert back.predict_epsilon(x, 7, cond, SCHED) == mlp.predict_epsilon(x, 7, cond, SCHED)
    assert model_to_bytes(back) == buf


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + struct.pack("<I", 9) + b[8:],
        lambda b: b[:8] + struct.pack("<I", 7) + b[12:],
        lambda b: b[:-3],
        lambda b: b + b"\0",
        lambda b: b[:10],
    ],
)
def test_malformed(gmm, mutate):
    with pytest.raises(FormatError):
        model_from_bytes(mutate(model_to_bytes(gmm)))


def test_mlp_bad_codes(mlp):
    buf = bytearray(model_to_bytes(mlp))
    # header is 12 bytes; activation and prediction are the 8th and 9th u32
    for idx in (7, 8):
        bad = bytearray(buf)
        struct.pack_into("<I", bad, 12 + 4 * idx, 99)
        with pytest.raises(FormatError):
            model_from_bytes(bytes(bad))


def test_mlp_weight_count_mismatch(mlp):
    buf = model_to_bytes(mlp)
    head = 12 + 40 + 8
    (n,) = struct.unpack_from("<Q", buf, head)
    bad = buf[:head] + struct.pack("<Q", n - 1) + buf[head + 8:-8]
    with pytest.raises(FormatError):
        model_from_bytes(bad)


def test_unknown_type():
    with pytest.raises(TypeError):
        model_to_bytes(object())
