import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from motlab.accounting import count_params
from motlab.core import (
    ConfigError,
    MixedSequence,
    TOWER_MODES,
    TowerMap,
    build_tower_map,
    init_params,
    make_modalities,
    param_shapes,
    text_specials,
    validate_config,
    validate_sequence,
)
from motlab.core import AttentionMode, Sparsity

from conftest import small_config

TRI = make_modalities(("text", "image", "speech"))


def assignment(tm, mods):
    return {m.name: tm.tower_of(m.id) for m in mods}


def test_tower_map_dense():
    assert assignment(build_tower_map("dense", TRI), TRI) == {"text": 0, "image": 0, "speech": 0}


def test_tower_map_loo_image():
    assert assignment(build_tower_map("loo_image", TRI), TRI) == {"image": 0, "text": 1, "speech": 1}


def test_tower_map_full_mot_two():
    two = make_modalities(("text", "image"))
    assert assignment(build_tower_map("full_mot", two), two) == {"text": 0, "image": 1}


@pytest.mark.parametrize("mode", ["loo_text", "loo_speech", "loo_image"])
def test_tower_map_loo_isolates(mode):
    tm = build_tower_map(mode, TRI)
    name = mode[4:]
    iso = [m for m in TRI if m.name == name][0]
    assert tm.n_towers == 2
    assert tm.members(tm.tower_of(iso.id)) == [iso.id]


def test_tower_map_errors():
    two = make_modalities(("text", "image"))
    with pytest.raises(ConfigError):
        build_tower_map("loo_speech", two)
    with pytest.raises(ConfigError):
        build_tower_map("loo_image", two)
    with pytest.raises(ConfigError):
        build_tower_map("bogus", TRI)
    with pytest.raises(ConfigError):
        build_tower_map("dense", ())


@pytest.mark.parametrize("mode", TOWER_MODES)
def test_tower_map_total_and_idempotent(mode):
    a = build_tower_map(mode, TRI)
    b = build_tower_map(mode, TRI)
    assert a == b
    assert not a.violations(3)
    assert a.n_towers <= 3


def test_tower_map_violations():
    assert TowerMap((0, 2)).violations(2)
    assert TowerMap((0,)).violations(2)
    with pytest.raises(ConfigError):
        TowerMap((0, 1)).lookup(torch.tensor([0, 2]))


def test_validate_dense_with_two_towers():
    cfg = small_config(sparsity="dense", tower_mode="full_mot")
    assert "dense requires K=1" in validate_config(cfg)


def test_validate_transfusion_causal():
    cfg = small_config(mode="transfusion").with_(attention_mode=AttentionMode.CAUSAL)
    assert any("hybrid" in v for v in validate_config(cfg))


def test_validate_ok_and_pure():
    cfg = small_config()
    before = repr(cfg)
    assert validate_config(cfg) == []
    assert repr(cfg) == before


def test_validate_collects_all():
    cfg = small_config(sparsity="dense", tower_mode="full_mot", heads=3, norm="batchnorm")
    v = validate_config(cfg)
    assert len(v) >= 3


def test_validate_chameleon_continuous():
    cfg = small_config(mode="transfusion").with_(objective_mode="chameleon", diffusion=None)
    assert any("discrete" in v for v in validate_config(cfg))


def test_init_deterministic():
    cfg = small_config(sparsity="mot_full")
    assert init_params(cfg, 3).equal(init_params(cfg, 3))
    assert not init_params(cfg, 3).equal(init_params(cfg, 4))


def test_init_shape_k3():
    cfg = small_config(names=("text", "image", "speech"), sparsity="mot_full", D=8)
    p = init_params(cfg, 0)
    assert tuple(p["layer.0.tower.2.wq"].shape) == (8, 8)
    assert torch.all(p["layer.0.tower.1.ln_attn"] == 1)


def test_init_towers_independent():
    p = init_params(small_config(sparsity="mot_full"), 0)
    assert not torch.equal(p["layer.0.tower.0.wq"], p["layer.0.tower.1.wq"])


def test_init_truncated():
    cfg = small_config(D=16)
    p = init_params(cfg, 0)
    w = p["layer.0.tower.0.wq"].detach()
    assert float(w.abs().max()) <= 2 * cfg.init_std
    assert abs(float(w.std()) - cfg.init_std) < 0.3 * cfg.init_std


def test_k2_minus_k1_is_7d2():
    D = 8
    one = init_params(small_config(names=("text",), sparsity="mot_full", D=D), 0)
    two = init_params(small_config(names=("text", "image"), sparsity="mot_full", D=D), 0)
    def layer_params(p):
        return sum(t.numel() for k, t in p.items() if k.startswith("layer.") and not k.endswith(("ln_attn", "ln_ffn")))
    assert layer_params(two) - layer_params(one) == 7 * D * D


@given(
    D=st.sampled_from([4, 8]),
    layers=st.integers(1, 2),
    names=st.sampled_from([("text",), ("text", "image"), ("text", "image", "speech")]),
    sparsity=st.sampled_from(list(Sparsity)),
    H=st.sampled_from([None, 6]),
)
def test_enumeration_matches_closed_form(D, layers, names, sparsity, H):
    cfg = small_config(names=names, sparsity=sparsity, D=D, layers=layers, H=H)
    assert init_params(cfg, 0).numel() == count_params(cfg)["params_total"]


def test_param_name_grammar():
    cfg = small_config(sparsity="hybrid_mot_text_moe", layers=2)
    import re
    pat = re.compile(
        r"^(embed\.\w+|head\.\w+|pos_embed|final_norm|patch_proj\.(in|out)|time_embed|"
        r"layer\.\d+\.(tower\.\d+\.)?(wq|wk|wv|wo|ffn_w[123]|ln_attn|ln_ffn|router|expert\.\d+\.ffn_w[123]))$"
    )
    names = list(param_shapes(cfg))
    assert len(set(names)) == len(names)
    assert all(pat.match(n) for n in names), [n for n in names if not pat.match(n)]
    assert "layer.1.tower.0.router" in names and "layer.1.tower.1.ffn_w1" in names


def _seq(cfg):
    sp = text_specials(cfg.text_vocab)
    img = cfg.modality("image").id
    ids = np.array([1, sp["boi"], -1, -1, sp["eoi"], 2])
    mod = np.array([0, 0, img, img, 0, 0])
    lat = np.zeros((6, cfg.latent_dim))
    lat[2:4] = 1.0
    return MixedSequence(mod, ids, lat, ((2, 4, 1, 4),))


def test_sequence_valid():
    cfg = small_config(mode="transfusion")
    assert validate_sequence(_seq(cfg), cfg) == []


def test_sequence_violations():
    cfg = small_config(mode="transfusion")
    s = _seq(cfg)
    bad_bracket = MixedSequence(s.modality_of, s.discrete_ids, s.latents, ((2, 4, 0, 4),))
    assert validate_sequence(bad_bracket, cfg)
    ids = s.discrete_ids.copy()
    ids[1] = 3
    assert validate_sequence(MixedSequence(s.modality_of, ids, s.latents, s.image_spans), cfg)
    mod = s.modality_of.copy()
    mod[2] = 0
    assert validate_sequence(MixedSequence(mod, s.discrete_ids, s.latents, s.image_spans), cfg)
    assert validate_sequence(MixedSequence(s.modality_of, s.discrete_ids, s.latents, ()), cfg)
