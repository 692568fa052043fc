import json

import pytest

from deepfuse import netspec
from deepfuse.netspec import (
    BlockDivision,
    FusedNetSpec,
    FusionKind,
    Member,
    NetworkSpec,
    SpecError,
    StageDef,
    builtin_catalog,
    expand,
    fused_spec_from_name,
    parse_spec,
    scale_width,
    serialize,
    validate,
)

CATALOG_LAYER_COUNTS = {"N1": 19, "N2": 50, "N3": 5, "N4": 8, "N5": 10, "N6": 11, "N7": 14}


def inline_member(name, stages, blocks, fc=100):
    doc = {"members": [{"network": name, "stages": stages, "blocks": blocks,
                        "fc_channels": fc}]}
    return parse_spec(json.dumps(doc)).members[0]


class TestCatalog:
    def test_all_entries_present(self):
        cat = builtin_catalog()
        for name in CATALOG_LAYER_COUNTS:
            assert isinstance(cat[name], NetworkSpec)
        for name in ["N13", "N33", "N43", "N63", "N73", "N16", "N26", "N46",
                     "N18", "N28", "N58"]:
            assert isinstance(cat[name], BlockDivision)

    @pytest.mark.parametrize("name,count", sorted(CATALOG_LAYER_COUNTS.items()))
    def test_layer_counts(self, name, count):
        assert builtin_catalog()[name].layer_count == count

    def test_layer_count_identity(self):
        # convs + fc + classifier equals the declared depth for every builtin
        for name, net in builtin_catalog().items():
            if isinstance(net, NetworkSpec):
                convs = sum(sd.repeat for sd in net.stages if sd.kind != "maxpool2")
                assert convs + 2 == net.layer_count

    def test_n1_structure(self):
        n1 = builtin_catalog()["N1"]
        reps = [sd.repeat for sd in n1.stages if sd.kind != "maxpool2"]
        chans = [sd.channels for sd in n1.stages if sd.kind != "maxpool2"]
        assert reps == [5, 6, 6]
        assert chans == [32, 80, 128]

    def test_n33_blocks(self):
        n33 = builtin_catalog()["N33"]
        assert n33.blocks == (("C11",), ("C21",), ("C31",))

    def test_divisions_tile_their_networks(self):
        cat = builtin_catalog()
        for name, div in cat.items():
            if not isinstance(div, BlockDivision):
                continue
            net = cat[div.network]
            ids = [cid for cid, _, _ in net.conv_seq()]
            flattened = [cid for blk in div.blocks for cid in blk]
            assert flattened == ids, name

    def test_eight_block_divisions_have_eight_blocks(self):
        cat = builtin_catalog()
        for name in ("N18", "N28", "N58"):
            assert cat[name].num_blocks == 8, name

    def test_repaired_divisions_carry_note(self):
        cat = builtin_catalog()
        assert cat["N18"].note is not None
        assert cat["N28"].note is not None
        assert cat["N13"].note is None


class TestParse:
    def test_builtin_pair_document(self):
        doc = json.dumps({"fusion": "sum", "classes": 100,
                          "members": [{"network": "N13"}, {"network": "N33"}]})
        spec = parse_spec(doc)
        assert len(spec.members) == 2
        assert spec.num_stages == 3
        assert spec.num_classes == 100

    def test_empty_members_rejected(self):
        with pytest.raises(SpecError, match="at least one base network"):
            parse_spec(json.dumps({"members": []}))

    def test_block_count_mismatch_names_both(self):
        doc = json.dumps({"members": [{"network": "N13"}, {"network": "N16"}]})
        with pytest.raises(SpecError) as exc:
            parse_spec(doc)
        assert "N13" in str(exc.value) and "N16" in str(exc.value)

    def test_unknown_network_name(self):
        with pytest.raises(SpecError, match="unknown network name"):
            parse_spec(json.dumps({"members": [{"network": "N99"}]}))

    def test_malformed_range(self):
        with pytest.raises(SpecError, match="not in this network"):
            inline_member("x", [["conv3x3", 8, 2]], [["C11", "C19"]])

    def test_invalid_json_positions(self):
        with pytest.raises(SpecError, match="line 1"):
            parse_spec("{not json")

    def test_unknown_field_rejected(self):
        with pytest.raises(SpecError, match="unknown field"):
            parse_spec(json.dumps({"members": [{"network": "N33"}], "bogus": 1}))

    def test_unknown_fusion_kind(self):
        with pytest.raises(SpecError, match="fusion"):
            parse_spec(json.dumps({"fusion": "mean",
                                   "members": [{"network": "N33"}]}))

    def test_identity_blocks_parse(self):
        m = inline_member("short", [["conv1x1", 8, 1]], [["C11"], []])
        assert m.division.blocks == (("C11",), ())

    def test_fused_name_resolution(self):
        spec = fused_spec_from_name("N13N33N43")
        assert [m.division.name for m in spec.members] == ["N13", "N33", "N43"]

    def test_fused_name_rejects_unknown(self):
        with pytest.raises(SpecError, match="unknown block division"):
            fused_spec_from_name("N13N99")
        with pytest.raises(SpecError, match="cannot split"):
            fused_spec_from_name("N13N3")


class TestRoundTrip:
    @pytest.mark.parametrize("name", ["N13N33", "N16N46", "N18N58", "N26N46"])
    def test_builtin_pairs(self, name):
        spec = fused_spec_from_name(name)
        assert parse_spec(serialize(spec)) == spec

    def test_inline_concat(self):
        doc = json.dumps({
            "fusion": "concat", "fuse_point": "after_relu", "classes": 10,
            "members": [
                {"network": "a", "stages": [["conv3x3", 32, 2]],
                 "blocks": [["C11"], ["C12"]]},
                {"network": "b", "stages": [["conv3x3", 32, 2]],
                 "blocks": [["C11"], ["C12"]]},
            ]})
        spec = parse_spec(doc)
        assert parse_spec(serialize(spec)) == spec

    def test_double_round_trip_stable(self):
        spec = fused_spec_from_name("N13N33")
        once = serialize(spec)
        assert serialize(parse_spec(once)) == once


class TestValidate:
    def test_n13n33_sum_valid(self):
        assert validate(fused_spec_from_name("N13N33")) == []

    def test_sum_channel_mismatch(self):
        doc = json.dumps({"members": [
            {"network": "a", "stages": [["conv3x3", 32, 1]], "blocks": [["C11"]]},
            {"network": "b", "stages": [["conv3x3", 48, 1]], "blocks": [["C11"]]},
        ]})
        diags = validate(parse_spec(doc))
        assert any(d.severity == "error" and "equal stage channels" in d.message
                   for d in diags)

    def test_concat_mixed_widths_valid(self):
        doc = json.dumps({"fusion": "concat", "members": [
            {"network": "a", "stages": [["conv3x3", 32, 1], ["conv3x3", 16, 1]],
             "blocks": [["C11"], ["C12"]]},
            {"network": "b", "stages": [["conv3x3", 32, 1], ["conv3x3", 24, 1]],
             "blocks": [["C11"], ["C12"]]},
        ]})
        spec = parse_spec(doc)
        assert validate(spec) == []
        plan = expand(spec)
        # stage 1 fuses 32+32=64 channels, so stage-2 convs read 64
        assert plan.stages[0].out_channels == 64
        assert plan.stages[1].blocks[0].units[0].in_channels == 64
        assert plan.stages[1].out_channels == 40

    def test_prepool_misalignment(self):
        doc = json.dumps({"members": [
            {"network": "a",
             "stages": [["conv3x3", 8, 1], ["maxpool2", 0, 1], ["conv3x3", 8, 1]],
             "blocks": [["C11"], ["C21"]]},
            {"network": "b", "stages": [["conv3x3", 8, 2]],
             "blocks": [["C11"], ["C12"]]},
        ]})
        diags = validate(parse_spec(doc))
        assert any("pool" in d.message for d in diags if d.severity == "error")

    def test_gap_in_division(self):
        doc = json.dumps({"members": [
            {"network": "a", "stages": [["conv3x3", 8, 3]],
             "blocks": [["C11"], ["C13"]]},
        ]})
        diags = validate(parse_spec(doc))
        assert any(d.severity == "error" for d in diags)

    def test_unusual_class_count_warns(self):
        doc = json.dumps({"classes": 7, "members": [{"network": "N33"}]})
        diags = validate(parse_spec(doc))
        assert any(d.severity == "warning" and "classes" in d.where for d in diags)
        assert not any(d.severity == "error" for d in diags)

    def test_repaired_division_warns(self):
        diags = validate(fused_spec_from_name("N28N58"))
        assert any(d.severity == "warning" and "N28" in d.message for d in diags)
        assert not any(d.severity == "error" for d in diags)


class TestExpand:
    def test_catalog_output_sizes(self):
        # composing the catalog stages reproduces 32 -> 16 -> 8 spatially
        plan = expand(fused_spec_from_name("N13N33"))
        hw = 32
        sizes = []
        for sp in plan.stages:
            if sp.prepool:
                hw //= 2
            sizes.append(hw)
        assert sizes == [32, 16, 8]

    def test_stage_channels(self):
        plan = expand(fused_spec_from_name("N13N33"))
        assert [sp.out_channels for sp in plan.stages] == [32, 80, 128]
        assert plan.head_in == 128
        assert plan.fc_channels == 100

    def test_mid_block_pools_for_b1_division(self):
        doc = json.dumps({"members": [
            {"network": "whole",
             "stages": [["conv3x3", 8, 2], ["maxpool2", 0, 1], ["conv3x3", 16, 2]],
             "blocks": [["C11", "C22"]]},
        ]})
        plan = expand(parse_spec(doc))
        kinds = [u.kind for u in plan.stages[0].blocks[0].units]
        assert kinds == ["conv3x3", "conv3x3", "maxpool2", "conv3x3", "conv3x3"]
        assert not plan.stages[0].prepool

    def test_scale_width(self):
        spec = scale_width(fused_spec_from_name("N13N33"), 0.25)
        chans = [sd.channels for sd in spec.members[0].spec.stages
                 if sd.kind != "maxpool2"]
        assert chans == [8, 20, 32]
        assert spec.members[0].spec.fc_channels == 25

    def test_scale_width_floor(self):
        spec = scale_width(fused_spec_from_name("N13N33"), 0.01)
        chans = {sd.channels for m in spec.members for sd in m.spec.stages
                 if sd.kind != "maxpool2"}
        assert min(chans) >= 1

    def test_block_sizes(self):
        plan = expand(fused_spec_from_name("N13N33"))
        assert [[b.size for b in sp.blocks] for sp in plan.stages] == [
            [5, 1], [6, 1], [6, 1]]
