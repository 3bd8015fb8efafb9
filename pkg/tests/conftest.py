import numpy as np
import pytest

from specmerge import TensorMap


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_map():
    """Factory for small multi-layer TensorMaps (two 2-D layers plus a bias)."""

    def build(seed=0, model_id="model", role="finetuned", dtype=np.float64):
        gen = np.random.default_rng(seed)
        entries = {
            "decoder.weight": gen.standard_normal((6, 4)).astype(dtype),
            "encoder.weight": gen.standard_normal((4, 3)).astype(dtype),
            "norm.bias": gen.standard_normal(5).astype(dtype),
        }
        return TensorMap(entries=entries, model_id=model_id, role=role)

    return build


@pytest.fixture
def make_delta():
    """Factory for random task vectors sharing one key layout."""

    def build(seed=0, model_id="delta", shapes=None):
        gen = np.random.default_rng(seed)
        shapes = shapes or {
            "attn.weight": (8, 5),
            "mlp.weight": (6, 6),
            "norm.bias": (7,),
        }
        entries = {name: gen.standard_normal(shape) for name, shape in shapes.items()}
        return TensorMap(entries=entries, model_id=model_id, role="delta")

    return build


def assert_maps_close(a, b, rtol=1e-9):
    """Per-layer comparison with atol tied to the layer's magnitude scale."""
    assert a.keys() == b.keys()
    for name in a.keys():
        scale = max(1e-30, float(np.max(np.abs(b[name]))))
        np.testing.assert_allclose(a[name], b[name], rtol=rtol, atol=rtol * scale, err_msg=name)


def assert_maps_equal(a, b):
    assert a.keys() == b.keys()
    for name in a.keys():
        assert np.array_equal(a[name], b[name]), name
