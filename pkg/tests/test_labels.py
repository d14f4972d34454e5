"""Label normalization: known labels, filtering rules, idempotence."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apkprobe.labels import FamilyLabel, normalize_label, same_family


@pytest.mark.parametrize("raw,family", [
    ("Trojan:Android/IconoSys.A", "iconosys"),
    ("Android.PUA.DebugKey", "debugkey"),
    ("Trojan-Dropper.AndroidOS.Shedun", "shedun"),
    ("Android:G4P-P [Trj]", "generic"),
    ("Trojan/Android.Bankun", "bankun"),
    ("AdWare.AndroidOS.DroidRooter", "droidrooter"),
    ("Trojan.AndroidOS.Agent", "generic"),
    ("Android/Packed.Jiagu.E", "packed"),
    ("PUA.AndroidOS.Jiagu", "jiagu"),
])
def test_known_labels(raw, family):
    assert normalize_label(raw).family == family


def test_alias_replacement():
    assert normalize_label("Android.BaseBrid.B").family == "basebridge"
    assert normalize_label("Trojan.KungFu").family == "droidkungfu"
    assert same_family("Android.BaseBrid.B", "BaseBridge.A")


def test_stop_tokens_dropped():
    label = normalize_label("Trojan:Win32/Malware.Gen")
    assert label.family == "generic"
    assert label.tokens == ()


def test_short_numeric_hex_dropped():
    assert normalize_label("Adware (005487961)").family == "generic"
    assert normalize_label("Mal.ab12.deadbeef.Realname").family == "realname"


def test_family_charset():
    label = normalize_label("Some.Weird-Label_Here!!")
    assert all(c.islower() or c.isdigit() for c in label.family)


def test_token_order_preserved():
    label = normalize_label("IconoSys.SmsReg")
    assert label.tokens == ("iconosys", "smsreg")
    assert label.family == "iconosys"


def test_idempotence_on_families():
    for raw in ("Trojan:Android/IconoSys.A", "Android.PUA.DebugKey",
                "weirdfamily"):
        family = normalize_label(raw).family
        assert normalize_label(family).family == family


@settings(max_examples=120, deadline=None)
@given(st.text(min_size=1, max_size=60))
def test_idempotence_property(raw):
    family = normalize_label(raw).family
    again = normalize_label(family)
    assert again.family == family
    assert isinstance(again, FamilyLabel)
