import json

import numpy as np
import pytest

from rdpfusion import autodiff as ad
from rdpfusion.autodiff import Tensor, gradient_check
from rdpfusion.errors import InvalidInputError
from rdpfusion.nn import (
    MLP,
    SGD,
    Adam,
    Linear,
    MinimalGatedCell,
    git_blob_hash,
    load_checkpoint,
    save_checkpoint,
)

SEEDS = range(20)


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_gradients(seed):
    rng = np.random.default_rng(seed)
    lin = Linear(3, 2, rng)
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    w = rng.standard_normal((4, 2))
    assert gradient_check(lambda: ad.tsum(ad.mul(lin(x), w)), lin.parameters() + [x]) < 1e-4


@pytest.mark.parametrize("act", [None, "sigmoid", "tanh"])
@pytest.mark.parametrize("seed", SEEDS)
def test_mlp_gradients(seed, act):
    rng = np.random.default_rng(seed)
    mlp = MLP(3, 5, 2, rng, out_activation=act)
    x = rng.standard_normal((4, 3))
    w = rng.standard_normal((4, 2))
    assert gradient_check(lambda: ad.tsum(ad.mul(mlp(x), w)), mlp.parameters()) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_cell_gradients_through_time(seed):
    rng = np.random.default_rng(seed)
    cell = MinimalGatedCell(2, 4, rng)
    xs = rng.standard_normal((3, 5, 2))
    w = rng.standard_normal((5, 4))

    def f():
        h = np.zeros((5, 4))
        for x in xs:
            h = cell(x, h)
        return ad.tsum(ad.mul(h, w))

    assert gradient_check(f, cell.parameters()) < 1e-4


def test_cell_zero_input_keeps_zero_state_fixed():
    rng = np.random.default_rng(0)
    cell = MinimalGatedCell(2, 3, rng, zero=True)
    h = cell(np.ones((1, 2)), np.zeros((1, 3)))
    assert np.allclose(ad._val(h), 0.0)


def test_shape_checks():
    rng = np.random.default_rng(0)
    with pytest.raises(InvalidInputError):
        Linear(3, 2, rng)(np.ones((1, 4)))
    with pytest.raises(InvalidInputError):
        MinimalGatedCell(2, 3, rng)(np.ones((1, 2)), np.ones((2, 3)))


def test_init_range():
    rng = np.random.default_rng(0)
    lin = Linear(16, 8, rng)
    assert np.all(np.abs(lin.weight.value) <= 0.25)


def test_zero_output_mlp_is_zero():
    rng = np.random.default_rng(0)
    mlp = MLP(3, 4, 2, rng, zero_output=True)
    assert np.all(ad._val(mlp(rng.standard_normal((5, 3)))) == 0.0)


def test_named_parameters_are_stable():
    rng = np.random.default_rng(0)
    mlp = MLP(3, 4, 2, rng)
    assert [n for n, _ in mlp.named_parameters()] == ["hidden.weight", "hidden.bias", "out.weight", "out.bias"]


def test_sgd_and_adam_descend_quadratic():
    for make in (lambda p: SGD(p, 0.1), lambda p: Adam(p, 0.05)):
        x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        opt = make([x])
        for _ in range(300):
            ad.backward(ad.tsum(ad.square(x)))
            opt.step()
        assert np.all(np.abs(x.value) < 0.05)


def test_adam_zero_lr_leaves_parameters():
    x = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([x], 0.0)
    ad.backward(ad.tsum(ad.square(x)))
    opt.step()
    assert x.value[0] == 1.0 and x.grad[0] == 0.0


def test_git_blob_hash_matches_git():
    # `printf 'hello\n' | git hash-object --stdin`
    assert git_blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    a = MLP(3, 4, 2, rng)
    b = MLP(3, 4, 2, np.random.default_rng(4))
    manifest = save_checkpoint(tmp_path / "ck", {"net": a}, seed=7, extra={"note": 1})
    assert (tmp_path / "ck.bin").stat().st_size == 8 * sum(p.value.size for p in a.parameters())
    assert manifest["sha1"] == git_blob_hash((tmp_path / "ck.bin").read_bytes())
    load_checkpoint(tmp_path / "ck", {"net": b})
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa.value, pb.value)
    meta = json.loads((tmp_path / "ck.json").read_text())
    assert meta["seed"] == 7 and meta["dtype"] == "float64-le"


def test_checkpoint_detects_corruption(tmp_path):
    rng = np.random.default_rng(3)
    a = MLP(3, 4, 2, rng)
    save_checkpoint(tmp_path / "ck", {"net": a})
    raw = bytearray((tmp_path / "ck.bin").read_bytes())
    raw[0] ^= 0xFF
    (tmp_path / "ck.bin").write_bytes(bytes(raw))
    with pytest.raises(InvalidInputError):
        load_checkpoint(tmp_path / "ck", {"net": a})
