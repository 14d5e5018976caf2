import numpy as np
import pytest

from tokenseek.adapters import AdapterConfig, AdapterSet, adapted_backward, adapted_forward, attach, resolve_targets
from tokenseek.ditcher import SelectionMask, forward_split
from tokenseek.model import ModelConfig, checkpoint_bytes, forward_full, init_params, load_checkpoint_bytes, next_token_targets
from tokenseek.oracle import central_difference, ditched_objective, reference_gradients, relative_error


@pytest.fixture
def adapted(tiny_params):
    ap = attach(tiny_params, ("all",), AdapterConfig(rank=2, alpha=4.0, dropout=0.0))
    rng = np.random.default_rng(3)
    for _, a in ap.adapters.items():
        a.up[...] = rng.standard_normal(a.up.shape) * 0.3
    return ap


def test_attach_identity(tiny_params, tiny_batch):
    ap = attach(tiny_params)
    base = forward_full(tiny_params, *tiny_batch).logits
    np.testing.assert_allclose(adapted_forward(ap, *tiny_batch).logits, base, rtol=0, atol=1e-12)


def test_scale_and_count(tiny_params):
    ap = attach(tiny_params, ("ff",), AdapterConfig(rank=8, alpha=16))
    assert all(a.scale == 2.0 for _, a in ap.adapters.items())
    H, F = tiny_params.config.hidden, tiny_params.config.ff_dim
    assert ap.adapters.count() == tiny_params.config.n_layers * ((H + F) * 8 + (F + H) * 8)


def test_resolve_targets(tiny_config):
    assert resolve_targets(tiny_config, "ff") == ["layers.0.w1", "layers.0.w2", "layers.1.w1", "layers.1.w2"]
    assert resolve_targets(tiny_config, ["layers.1.wq", "wq"]) == ["layers.1.wq", "layers.0.wq"]
    with pytest.raises(KeyError):
        resolve_targets(tiny_config, ["layers.7.wq"])


def test_backbone_gradients_zero(adapted, tiny_batch):
    res = adapted_forward(adapted, *tiny_batch)
    backbone, ag = adapted_backward(adapted, res.cache)
    assert all(np.all(v == 0) for _, v in backbone.items())
    assert any(np.any(g.down != 0) for g in ag.values())


def test_adapter_grads_match_fd_full_selection(adapted, tiny_batch):
    tokens, targets = tiny_batch
    mask = SelectionMask.full(len(tokens))
    res = adapted_forward(adapted, tokens, targets, mask)
    _, ag = adapted_backward(adapted, res.cache)
    p = adapted.params
    probe = adapted.adapters
    for name, a in probe.items():
        f = lambda: ditched_objective(p, p, tokens, targets, mask, adapters=probe)  # noqa: E731
        assert relative_error(ag[name].down, central_difference(f, a.down)) <= 1e-6
        assert relative_error(ag[name].up, central_difference(f, a.up)) <= 1e-6


@pytest.mark.parametrize("dropout", [0.0, 0.3])
def test_ditched_adapted_matches_oracle(tiny_params, tiny_batch, dropout):
    tokens, targets = tiny_batch
    ap = attach(tiny_params, ("all",), AdapterConfig(rank=2, alpha=4.0, dropout=dropout, seed=1))
    for _, a in ap.adapters.items():
        a.up[...] = 0.2
    mask = SelectionMask(len(tokens), [1, 4, 6])
    key = 5 if dropout else None
    res = adapted_forward(ap, tokens, targets, mask, dropout_key=key)
    _, ag = adapted_backward(ap, res.cache, dropout_key=key)
    _, _, ref = reference_gradients(tiny_params, tokens, targets, mask, adapters=ap.adapters, dropout_key=key)
    a = np.concatenate([np.r_[ag[k].down.ravel(), ag[k].up.ravel()] for k in ag])
    b = np.concatenate([np.r_[ref[k][0].ravel(), ref[k][1].ravel()] for k in ag])
    assert relative_error(a, b) <= 1e-10


def test_dropout_replay(tiny_params, tiny_batch):
    ap = attach(tiny_params, ("ff",), AdapterConfig(dropout=0.5, seed=4))
    for _, a in ap.adapters.items():
        a.up[...] = 0.1
    l1 = adapted_forward(ap, *tiny_batch, dropout_key=7).loss
    l2 = adapted_forward(ap, *tiny_batch, dropout_key=7).loss
    l3 = adapted_forward(ap, *tiny_batch, dropout_key=8).loss
    assert l1 == l2 and l1 != l3


def test_adapted_cache_not_larger_than_full(tiny_params, tiny_batch):
    tokens, targets = tiny_batch
    ap = attach(tiny_params, ("ff",), AdapterConfig(rank=4))
    mask = SelectionMask(len(tokens), [0, 3, 7])
    full = forward_split(tiny_params, tokens, targets, mask).cache.total_scalars()
    assert adapted_forward(ap, tokens, targets, mask).cache.total_scalars() <= full


def test_adapter_checkpoint_section(adapted):
    blob = checkpoint_bytes(adapted.params, adapted.adapters)
    params, extra = load_checkpoint_bytes(blob)
    restored = AdapterSet.from_bytes(extra)
    assert list(restored.adapters) == list(adapted.adapters.adapters)
    for name, a in restored.items():
        assert np.array_equal(a.down, adapted.adapters[name].down)
        assert np.array_equal(a.up, adapted.adapters[name].up)
