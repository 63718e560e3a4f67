import itertools

import pytest

from motlab.accounting import (
    CostReport,
    base_layer_params,
    count_macs,
    count_params,
    cost_report,
    enumerate_params,
    mac_breakdown,
    moe_delta_per_layer,
    mot_delta_per_layer,
    ppf_compare,
)

from conftest import small_config

THREE = ("text", "image", "speech")


def test_delta_examples():
    assert mot_delta_per_layer(8, 8, 1, "mot_full") == 0
    assert mot_delta_per_layer(8, 8, 3, "mot_full", include_norms=False) == 896
    assert mot_delta_per_layer(8, 8, 3, "mot_full") == 896 + 2 * 2 * 8
    assert moe_delta_per_layer(8, 8, 4) == 608
    assert mot_delta_per_layer(8, 8, 2, "mot_ffn_only") == 192
    assert mot_delta_per_layer(8, 8, 2, "mot_ffn_qkv") == 192 + 192
    assert base_layer_params(8, 8) == 7 * 64 + 16


def _grid():
    for D, K, E in itertools.product((4, 8, 16), (1, 2, 3), (2, 4)):
        names = THREE[:K] if K > 1 else ("text", "image")
        yield D, names, "dense", "dense", E
        yield D, names, "moe", "dense", E
        if K > 1:
            for s in ("mot_full", "mot_ffn_only", "mot_ffn_qkv", "hybrid_mot_text_moe"):
                yield D, names, s, "full_mot", E


@pytest.mark.parametrize("D,names,sparsity,tower_mode,E", list(_grid()))
def test_closed_form_equals_enumeration(D, names, sparsity, tower_mode, E):
    cfg = small_config(names=names, sparsity=sparsity, tower_mode=tower_mode, D=D, heads=2, layers=2, moe_experts=E)
    cp = count_params(cfg)
    assert cp["params_by_group"] == enumerate_params(cfg)
    assert cp["params_total"] == sum(enumerate_params(cfg).values())
    assert all(v >= 0 for v in cp["params_by_group"].values())


@pytest.mark.parametrize("names,mode", [(("text", "image"), "chameleon"), (THREE, "chameleon"),
                                        (("text", "image"), "transfusion")])
@pytest.mark.parametrize("sparsity", ["mot_full", "mot_ffn_only", "mot_ffn_qkv"])
def test_mac_parity_with_dense(names, sparsity, mode):
    dense = small_config(names=names, mode=mode, layers=2)
    mot = small_config(names=names, mode=mode, sparsity=sparsity, layers=2)
    assert count_macs(dense, 12) == count_macs(mot, 12)
    assert count_params(mot)["params_total"] > count_params(dense)["params_total"]


def test_moe_ffn_macs_equal_dense():
    dense = mac_breakdown(small_config(), 16)
    moe = mac_breakdown(small_config(sparsity="moe", moe_experts=4), 16)
    assert moe["ffn"] == dense["ffn"]
    assert moe["router"] == 16 * 8 * 4  # n * D * E, one layer
    assert {k: v for k, v in moe.items() if k != "router"} == dense


def test_hybrid_params_and_macs():
    mot = small_config(sparsity="mot_full", moe_experts=4)
    hyb = small_config(sparsity="hybrid_mot_text_moe", moe_experts=4)
    D, H = mot.D, mot.H
    diff = count_params(hyb)["params_total"] - count_params(mot)["params_total"]
    assert diff == mot.n_layers * moe_delta_per_layer(D, H, 4)
    a, b = mac_breakdown(mot, 16), mac_breakdown(hyb, 16)
    assert {k: v for k, v in b.items() if k != "router"} == a


def test_attention_quadratic_term():
    cfg = small_config(seq_len=64)
    assert count_macs(cfg, 32) > 2 * count_macs(cfg, 16)


def test_ppf_signs():
    D = 8
    # K=3 vs E=4 with D=H: MoT adds 14D^2 (+norms) vs MoE 9D^2+4D, so MoT has the higher PpF
    mot3 = small_config(names=THREE, sparsity="mot_full", D=D, H=D)
    moe4 = small_config(names=THREE, sparsity="moe", moe_experts=4, D=D, H=D)
    t = ppf_compare([mot3, moe4], 12, ["mot3", "moe4"])
    assert t.compare(0, 1) > 0 and t.lowest_ppf().label == "moe4"
    mot2 = small_config(sparsity="mot_full", D=D, H=D)
    moe8 = small_config(sparsity="moe", moe_experts=8, D=D, H=D)
    t = ppf_compare([mot2, moe8], 16)
    assert t.compare(0, 1) < 0
    same = ppf_compare([mot2, mot2], 16)
    assert same.reports[0] == same.reports[1]
    with pytest.raises(ValueError):
        ppf_compare([mot2], 16)


def test_cost_report_round_trip():
    rep = cost_report(small_config(sparsity="mot_full"), 12)
    assert CostReport.from_json(rep.to_json()) == rep
    assert rep.params_total == sum(rep.params_by_group.values())
    assert rep.macs_forward == sum(rep.macs_by_tag.values())
    assert rep.ppf == rep.params_total / rep.macs_forward_per_token
