import pytest

from opkgen.machine import load_preset
from opkgen.tiling import (
    NoTiling,
    TilingError,
    enumerate_tilings,
    instruction_mix,
    uniform_partition,
)
from opkgen.updates import enumerate_nu_choices, search_unit_updates


def all_updates(machine):
    ups = []
    for n_u in sorted(enumerate_nu_choices(machine.vector_width, machine)):
        try:
            ups.extend(search_unit_updates(machine, n_u))
        except Exception:
            pass
    return ups


def test_snb_8x4_two_tilings():
    m = load_preset("sandybridge")
    tilings = enumerate_tilings(8, 4, all_updates(m))
    assert len(tilings) == 2
    sizes = {tuple(sorted(t.composition())) for t in tilings}
    # one covering entirely of broadcasts, one of shuffle updates
    assert {("4x1:vbroadcastsd",), ("4x4:vmovapd",)} == sizes
    bcast = next(t for t in tilings if "4x1:vbroadcastsd" in t.composition())
    shuf = next(t for t in tilings if "4x4:vmovapd" in t.composition())
    assert len(bcast.cells) == 8
    assert len(shuf.cells) == 2


def test_knc_8x30_eight_tilings():
    m = load_preset("knc")
    tilings = enumerate_tilings(8, 30, all_updates(m))
    assert len(tilings) == 8
    perm_counts = sorted(
        t.composition().get("8x4:vbroadcast_4to8", 0) for t in tilings)
    assert perm_counts == list(range(8))
    for t in tilings:
        p = t.composition().get("8x4:vbroadcast_4to8", 0)
        assert t.composition().get("8x1:vfmadd231pd_1to8", 0) == 30 - 4 * p


def test_no_tiling_when_shape_exceeds_grid():
    m = load_preset("knc")
    ups = [u for u in all_updates(m) if u.n_u == 4]
    with pytest.raises(NoTiling):
        enumerate_tilings(8, 3, ups)  # 3 columns cannot be covered by width 4


def test_cell_areas_sum():
    for name in ("sandybridge", "knc", "penryn", "nehalem", "haswell"):
        m = load_preset(name)
        mr, nr = m.meta["mr"], m.meta["nr"]
        for t in enumerate_tilings(mr, nr, all_updates(m)):
            area = sum(c.update.m_v * c.update.n_u for c in t.cells)
            assert area == mr * nr


def test_mix_snb_8x4():
    m = load_preset("sandybridge")
    tilings = enumerate_tilings(8, 4, all_updates(m))
    bcast = next(t for t in tilings if "4x1:vbroadcastsd" in t.composition())
    shuf = next(t for t in tilings if "4x4:vmovapd" in t.composition())
    mb = instruction_mix(bcast, m).counts
    assert mb == {"vmovapd": 2, "vbroadcastsd": 8, "vfma": 8}
    ms = instruction_mix(shuf, m).counts
    assert ms == {"vmovapd": 3, "vshufpd": 2, "vperm2f128": 1, "vfma": 8}


def test_mix_snb_4x12():
    m = load_preset("sandybridge")
    tilings = enumerate_tilings(4, 12, all_updates(m))
    bcast = next(t for t in tilings if t.composition().get("4x1:vbroadcastsd") == 12)
    shuf = next(t for t in tilings if t.composition().get("4x4:vmovapd") == 3)
    mb = instruction_mix(bcast, m).counts
    assert mb["vmovapd"] == 1 and mb["vbroadcastsd"] == 12 and mb["vfma"] == 12
    ms = instruction_mix(shuf, m).counts
    assert ms["vmovapd"] == 4  # 1 A column + 3 segment loads
    assert ms["vshufpd"] + ms["vperm2f128"] == 9
    assert ms["vfma"] == 12


def test_mix_knc_one_permute():
    m = load_preset("knc")
    tilings = enumerate_tilings(8, 30, all_updates(m))
    t = next(x for x in tilings if x.composition().get("8x4:vbroadcast_4to8") == 1)
    c = instruction_mix(t, m, prefetches=4).counts
    assert c["vmovapd"] == 1
    assert c["vbroadcast_4to8"] == 1
    assert c["vpermf32x4"] == 1
    assert c["vfmadd231pd"] == 2 and c["vfmadd231pd_cdab"] == 2
    assert c["vfmadd231pd_1to8"] == 26
    assert c["vprefetch0"] == 4
    # memory-pipe instruction count comes out as 1+1+26+4 = 32
    mem = c["vmovapd"] + c["vbroadcast_4to8"] + c["vfmadd231pd_1to8"] + c["vprefetch0"]
    assert mem == 32


def test_fma_lane_conservation():
    for name in ("sandybridge", "knc", "haswell"):
        m = load_preset(name)
        mr, nr = m.meta["mr"], m.meta["nr"]
        v = m.vector_width
        for t in enumerate_tilings(mr, nr, all_updates(m)):
            mix = instruction_mix(t, m)
            lanes = 0
            for mnemonic, count in mix.counts.items():
                ins = m.instr(mnemonic)
                cp = ins.compute_part
                if cp is not None and cp.op in ("fma", "mul"):
                    lanes += count * v
            assert lanes == mr * nr, (name, t.signature())


def test_enumerate_deterministic():
    m = load_preset("knc")
    a = [t.signature() for t in enumerate_tilings(8, 30, all_updates(m))]
    b = [t.signature() for t in enumerate_tilings(8, 30, all_updates(m))]
    assert a == b and len(set(a)) == len(a)


def test_uniform_partition():
    assert len(uniform_partition(8, 4, 4, 2)) == 4
    assert uniform_partition(8, 4, 8, 4) == [(0, 0)]
    with pytest.raises(TilingError):
        uniform_partition(8, 4, 4, 3)
