import numpy as np
import pytest

from tmim import tensor as T
from tmim.model import PromptedModel, Task
from tmim.tensor import ShapeError, Tensor

from gradcheck import rel_err
from tmim.oracles import oracle_finite_diff


@pytest.fixture(scope="module")
def model():
    return PromptedModel.init(0)


def x_batch(seed, n=2, size=16):
    return np.random.default_rng(seed).uniform(size=(n, 3, size, size))


def test_task_enum():
    assert Task.parse("te") is Task.TE and Task.parse(Task.BM) is Task.BM
    assert len(Task) == 2
    with pytest.raises(ValueError):
        Task.parse("XX")


def test_shape_preserved_and_range(model):
    for size in (8, 16, 24):
        out = model(x_batch(size, 2, size), Task.TE).data
        assert out.shape == (2, 3, size, size)
        assert np.all(out > 0) and np.all(out < 1)


def test_indivisible_size(model):
    with pytest.raises(ShapeError):
        model(np.zeros((1, 3, 12, 16)), Task.TE)


def test_zero_prompts_give_identical_streams(model):
    x = x_batch(1)
    assert np.array_equal(model(x, Task.BM).data, model(x, Task.TE).data)


@pytest.mark.parametrize("task", [Task.BM, Task.TE])
def test_prompt_locality(task):
    m = PromptedModel.init(0)
    x = x_batch(2)
    before = {t: m(x, t).data for t in Task}
    m.params[f"prompt.{task.value}"].data += 1.0
    other = Task.TE if task is Task.BM else Task.BM
    assert not np.array_equal(m(x, task).data, before[task])
    assert np.array_equal(m(x, other).data, before[other])


def test_init_determinism():
    a, b, c = PromptedModel.init(5), PromptedModel.init(5), PromptedModel.init(6)
    assert [n for n, _ in a.parameters()] == [n for n, _ in b.parameters()]
    assert all(np.array_equal(p.data, q.data) for (_, p), (_, q) in zip(a.parameters(), b.parameters()))
    assert not np.array_equal(a.params["enc1.weight"].data, c.params["enc1.weight"].data)
    assert np.isfinite(a(np.full((1, 3, 16, 16), 0.5), Task.TE).data).all()


def test_init_bounds_and_zeros():
    m = PromptedModel.init(1)
    for name, p in m.parameters():
        if name.endswith(".weight"):
            bound = np.sqrt(6.0 / np.prod(p.shape[1:]))
            assert np.abs(p.data).max() <= bound
        else:
            assert not p.data.any()


def test_parameter_order_and_flags(model):
    names = [n for n, _ in model.parameters()]
    assert len(names) == len(set(names))
    expected = ["enc1", "enc2", "enc3", "bottleneck", "prompt", "dec3", "dec2", "dec1", "head"]
    stems = []
    for n in names:
        s = n.split(".")[0]
        if not stems or stems[-1] != s:
            stems.append(s)
    assert stems == expected
    assert model.params["prompt.BM"].shape == (64,) and model.params["prompt.TE"].shape == (64,)
    assert [n for n in names if model.no_decay(n)] == ["prompt.BM", "prompt.TE"]


def test_channel_widths(model):
    p = model.params
    assert p["enc1.weight"].shape == (16, 3, 3, 3)
    assert p["enc2.weight"].shape == (32, 16, 3, 3)
    assert p["enc3.weight"].shape == (64, 32, 3, 3)
    assert p["bottleneck.weight"].shape == (64, 64, 3, 3)
    assert p["head.weight"].shape == (3, 16, 3, 3)


def test_state_dict_roundtrip_errors(model):
    m = PromptedModel.init(3)
    m.load_state_dict(model.state_dict())
    assert all(np.array_equal(p.data, model.params[n].data) for n, p in m.parameters())
    bad = model.state_dict()
    bad["extra"] = np.zeros(1)
    with pytest.raises(KeyError):
        m.load_state_dict(bad)
    bad = model.state_dict()
    bad["head.bias"] = np.zeros(4)
    with pytest.raises(ShapeError):
        m.load_state_dict(bad)


@pytest.mark.parametrize("task", [Task.BM, Task.TE])
def test_gradients_every_parameter(task):
    """mean(forward(x)) vs central differences on a 1x3x8x8 input, sampled entries per tensor."""
    m = PromptedModel.init(11)
    r = np.random.default_rng(12)
    # nonzero biases and prompts so every path carries signal
    for name, p in m.parameters():
        if not name.endswith(".weight"):
            p.data = r.normal(scale=0.1, size=p.shape)
    x = Tensor(r.uniform(size=(1, 3, 8, 8)))
    m.zero_grad()
    T.mean(m(x, task)).backward()
    for name, p in m.parameters():
        if name.startswith("prompt.") and name != f"prompt.{task.value}":
            assert p.grad is None
            continue
        idx = r.choice(p.size, size=min(p.size, 8), replace=False)
        base = p.data.copy()

        def fn(t, p=p, base=base):
            p.data = t.data
            with T.no_grad():
                out = T.mean(m(x, task))
            p.data = base
            return out

        numeric = oracle_finite_diff(fn, Tensor(base), 1e-6, idx).data.reshape(-1)[idx]
        analytic = p.grad.reshape(-1)[idx]
        assert rel_err(analytic, numeric) < 1e-4, name
